//! Stage-two volume construction: feature back-projection, depth occupancy
//! and the unified scene volume.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Camera, VoxelGridSpec};
use crate::mvs::{bilinear_taps, FeatureMap};
use crate::raster::DepthMap;

pub use crate::volume::SceneVolume;

#[derive(Clone, Debug, PartialEq)]
pub struct BackprojectedFeatures {
    pub features: SceneVolume,
    /// 1 where the voxel center falls inside the camera frustum, else 0.
    pub count: SceneVolume,
}

/// Bilinearly samples `f` at the projection of every voxel center. Voxels
/// behind the camera or projecting outside the map stay zero.
pub fn backproject_features(
    f: &FeatureMap,
    cam: &Camera,
    spec: &VoxelGridSpec,
) -> Result<BackprojectedFeatures> {
    let k = &cam.intrinsics;
    if k.width != f.width || k.height != f.height {
        return Err(Error::ShapeMismatch(format!(
            "camera is {}x{}, feature map is {}x{}",
            k.width, k.height, f.width, f.height
        )));
    }
    let n = spec.num_voxels();
    let taps: Vec<Option<[(usize, f64); 4]>> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let [i, j, kk] = spec.unravel(idx);
            let p = cam.project_world(&spec.voxel_center(i, j, kk)).ok()?;
            bilinear_taps(f.width, f.height, p.u, p.v)
        })
        .collect();
    let hw = f.width * f.height;
    let mut data = vec![0.0; f.channels * n];
    data.par_chunks_mut(n).enumerate().for_each(|(c, dst)| {
        let src = &f.data[c * hw..(c + 1) * hw];
        for (d, t) in dst.iter_mut().zip(&taps) {
            if let Some(t) = t {
                *d = t.iter().map(|(i, w)| w * src[*i]).sum();
            }
        }
    });
    let count = taps
        .iter()
        .map(|t| if t.is_some() { 1.0 } else { 0.0 })
        .collect();
    Ok(BackprojectedFeatures {
        features: SceneVolume {
            spec: *spec,
            channels: f.channels,
            data,
        },
        count: SceneVolume {
            spec: *spec,
            channels: 1,
            data: count,
        },
    })
}

/// Voxels hit by at least one valid pixel of `depth`, as a per-voxel flag.
pub fn depth_indicator(depth: &DepthMap, cam: &Camera, spec: &VoxelGridSpec) -> Result<Vec<bool>> {
    let k = &cam.intrinsics;
    if k.width != depth.width || k.height != depth.height {
        return Err(Error::ShapeMismatch(format!(
            "camera is {}x{}, depth map is {}x{}",
            k.width, k.height, depth.width, depth.height
        )));
    }
    let mut hit = vec![false; spec.num_voxels()];
    for v in 0..depth.height {
        for u in 0..depth.width {
            let Some(z) = depth.get(u, v) else { continue };
            let p = cam.backproject_world(u as f64, v as f64, z)?;
            if let Some([i, j, kk]) = spec.nearest_voxel(&spec.world_to_voxel(&p)) {
                hit[spec.linear_index(i, j, kk)] = true;
            }
        }
    }
    Ok(hit)
}

/// Fraction of views whose masked depth lands in each voxel.
pub fn embed_depth_occupancy(
    depths: &[&DepthMap],
    cams: &[&Camera],
    spec: &VoxelGridSpec,
) -> Result<SceneVolume> {
    if depths.is_empty() {
        return Err(Error::Empty("depth maps"));
    }
    if depths.len() != cams.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} depth maps for {} cameras",
            depths.len(),
            cams.len()
        )));
    }
    let indicators = depths
        .par_iter()
        .zip(cams.par_iter())
        .map(|(d, c)| depth_indicator(d, c, spec))
        .collect::<Result<Vec<_>>>()?;
    let mut counts = vec![0u32; spec.num_voxels()];
    for ind in &indicators {
        for (c, &h) in counts.iter_mut().zip(ind) {
            *c += h as u32;
        }
    }
    let n = depths.len() as f64;
    Ok(SceneVolume {
        spec: *spec,
        channels: 1,
        data: counts.into_iter().map(|c| c as f64 / n).collect(),
    })
}

/// `[occupancy, features...]`
pub fn build_unified_volume(
    posed_feature_avg: &SceneVolume,
    occupancy: &SceneVolume,
) -> Result<SceneVolume> {
    if occupancy.channels != 1 {
        return Err(Error::ShapeMismatch(format!(
            "occupancy has {} channels",
            occupancy.channels
        )));
    }
    occupancy.concat(posed_feature_avg)
}

/// Inverse of [`build_unified_volume`].
pub fn split_unified_volume(unified: &SceneVolume) -> Result<(SceneVolume, SceneVolume)> {
    if unified.channels < 1 {
        return Err(Error::ShapeMismatch(
            "unified volume has no channels".into(),
        ));
    }
    unified.split_at(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Pose, RigidTransform, Vec3};
    use proptest::prelude::*;

    fn k() -> Intrinsics {
        Intrinsics::new(20.0, 20.0, 9.5, 7.5, 20, 16).unwrap()
    }

    fn grid() -> VoxelGridSpec {
        VoxelGridSpec::new([-0.7, -0.7, 0.3], 0.2, [8, 8, 8]).unwrap()
    }

    fn ramp(c: usize) -> FeatureMap {
        let (h, w) = (16, 20);
        let data = (0..c * h * w)
            .map(|i| (i % 97) as f64 * 0.1 + (i / (h * w)) as f64)
            .collect();
        FeatureMap::new(c, h, w, data).unwrap()
    }

    #[test]
    fn constant_map_fills_frustum_only() {
        let f = FeatureMap::new(1, 16, 20, vec![1.0; 320]).unwrap();
        let cam = Camera::new(k(), Pose::identity());
        let out = backproject_features(&f, &cam, &grid()).unwrap();
        for (f, c) in out.features.data.iter().zip(&out.count.data) {
            assert!((f - c).abs() < 1e-12);
        }
        let inside = out.count.data.iter().filter(|&&c| c == 1.0).count();
        assert!(inside > 0 && inside < grid().num_voxels());
    }

    #[test]
    fn axis_voxel_gets_principal_point_feature() {
        let kk = Intrinsics::new(20.0, 20.0, 10.0, 8.0, 20, 16).unwrap();
        let f = ramp(2);
        let spec = VoxelGridSpec::new([0.0, 0.0, 1.0], 0.1, [1, 1, 1]).unwrap();
        let out = backproject_features(&f, &Camera::new(kk, Pose::identity()), &spec).unwrap();
        assert_eq!(out.features.data, vec![f.at(0, 8, 10), f.at(1, 8, 10)]);
    }

    #[test]
    fn count_matches_brute_force_frustum_test() {
        let t = RigidTransform::new(
            crate::geometry::rotation_about_axis(&Vec3::new(0.2, 1.0, 0.1).normalize(), 0.3),
            Vec3::new(0.1, -0.05, 0.2),
        )
        .unwrap();
        let cam = Camera::new(k(), Pose::camera_from_world(t));
        let spec = grid();
        let out = backproject_features(&ramp(1), &cam, &spec).unwrap();
        for idx in 0..spec.num_voxels() {
            let [i, j, l] = spec.unravel(idx);
            let pc = t.apply(&spec.voxel_center(i, j, l));
            let u = 20.0 * pc.x / pc.z + 9.5;
            let v = 20.0 * pc.y / pc.z + 7.5;
            let inside = pc.z > 0.0 && (0.0..=19.0).contains(&u) && (0.0..=15.0).contains(&v);
            assert_eq!(
                out.count.data[idx],
                if inside { 1.0 } else { 0.0 },
                "voxel {idx}"
            );
        }
    }

    #[test]
    fn translated_camera_and_grid_agree() {
        let f = ramp(3);
        let shift = Vec3::new(0.13, -0.4, 0.7);
        let a = backproject_features(&f, &Camera::new(k(), Pose::identity()), &grid()).unwrap();
        let moved_cam = Camera::new(
            k(),
            Pose::world_from_camera(RigidTransform::from_translation(shift)),
        );
        let g = grid();
        let moved_grid = VoxelGridSpec::new(
            [
                g.origin[0] + shift.x,
                g.origin[1] + shift.y,
                g.origin[2] + shift.z,
            ],
            g.pitch,
            g.dims,
        )
        .unwrap();
        let b = backproject_features(&f, &moved_cam, &moved_grid).unwrap();
        for (x, y) in a.features.data.iter().zip(&b.features.data) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(a.count.data, b.count.data);
    }

    /// Camera at the origin looking down +z with one valid pixel at depth `z`.
    fn single_pixel(u: usize, v: usize, z: f64) -> DepthMap {
        let mut d = DepthMap::invalid(20, 16);
        d.set(u, v, Some(z));
        d
    }

    #[test]
    fn one_pixel_one_voxel() {
        let cam = Camera::new(k(), Pose::identity());
        let occ = embed_depth_occupancy(&[&single_pixel(10, 8, 0.9)], &[&cam], &grid()).unwrap();
        assert_eq!(occ.data.iter().filter(|&&x| x == 1.0).count(), 1);
        assert_eq!(
            occ.data.iter().filter(|&&x| x == 0.0).count(),
            grid().num_voxels() - 1
        );
    }

    #[test]
    fn two_view_hand_example() {
        // both views hit the voxel at the principal ray; only view 1 also
        // hits a second voxel, one column to the right
        let kk = Intrinsics::new(20.0, 20.0, 10.0, 8.0, 20, 16).unwrap();
        let spec = VoxelGridSpec::new([-0.4, -0.4, 0.6], 0.2, [5, 5, 3]).unwrap();
        let cam = Camera::new(kk, Pose::identity());
        let mut d1 = DepthMap::invalid(20, 16);
        d1.set(10, 8, Some(0.8));
        d1.set(14, 8, Some(0.8)); // x = 0.16 → voxel column i = 3
        d1.set(15, 8, Some(0.8)); // same voxel, counts once
        let d2 = single_pixel(10, 8, 0.8);
        let occ = embed_depth_occupancy(&[&d1, &d2], &[&cam, &cam], &spec).unwrap();
        let a = spec.linear_index(2, 2, 1);
        let b = spec.linear_index(3, 2, 1);
        assert_eq!(occ.data[a], 1.0);
        assert_eq!(occ.data[b], 0.5);
        assert_eq!(occ.data.iter().filter(|&&x| x != 0.0).count(), 2);
    }

    #[test]
    fn out_of_grid_points_dropped() {
        let cam = Camera::new(k(), Pose::identity());
        let occ = embed_depth_occupancy(&[&single_pixel(10, 8, 9.0)], &[&cam], &grid()).unwrap();
        assert!(occ.data.iter().all(|&x| x == 0.0));
        assert!(embed_depth_occupancy(&[], &[], &grid()).is_err());
    }

    #[test]
    fn unified_layout() {
        let spec = grid();
        let feats = SceneVolume::zeros(spec, 32);
        let mut occ = SceneVolume::zeros(spec, 1);
        occ.data[5] = 0.5;
        let u = build_unified_volume(&feats, &occ).unwrap();
        assert_eq!(u.channels, 33);
        assert_eq!(u.channel(0), occ.data.as_slice());
        assert!(u.data[spec.num_voxels()..].iter().all(|&x| x == 0.0));
        let (o2, f2) = split_unified_volume(&u).unwrap();
        assert_eq!((o2, f2), (occ, feats));
        let other = SceneVolume::zeros(VoxelGridSpec::new([0.0; 3], 0.2, [8, 8, 8]).unwrap(), 1);
        assert!(build_unified_volume(&SceneVolume::zeros(spec, 2), &other).is_err());
    }

    fn random_depth(seed: u64, density: f64) -> DepthMap {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut d = DepthMap::invalid(20, 16);
        for v in 0..16 {
            for u in 0..20 {
                if rng.random::<f64>() < density {
                    d.set(u, v, Some(rng.random_range(0.4..1.8)));
                }
            }
        }
        d
    }

    proptest! {
        #[test]
        fn occupancy_is_view_fraction_and_order_free(seed in 0u64..1000, n in 1usize..5) {
            let depths: Vec<DepthMap> = (0..n).map(|i| random_depth(seed * 10 + i as u64, 0.3)).collect();
            let cams: Vec<Camera> = (0..n)
                .map(|i| Camera::new(k(), Pose::world_from_camera(RigidTransform::from_translation(Vec3::new(0.05 * i as f64, 0.0, 0.0)))))
                .collect();
            let dr: Vec<&DepthMap> = depths.iter().collect();
            let cr: Vec<&Camera> = cams.iter().collect();
            let occ = embed_depth_occupancy(&dr, &cr, &grid()).unwrap();
            for &x in &occ.data {
                let k = x * n as f64;
                prop_assert!((k - k.round()).abs() < 1e-12 && (0.0..=n as f64).contains(&k));
            }
            let rev_d: Vec<&DepthMap> = dr.iter().rev().copied().collect();
            let rev_c: Vec<&Camera> = cr.iter().rev().copied().collect();
            prop_assert_eq!(embed_depth_occupancy(&rev_d, &rev_c, &grid()).unwrap(), occ);
        }

        #[test]
        fn occupied_count_monotone_in_pixels(seed in 0u64..1000) {
            let cam = Camera::new(k(), Pose::identity());
            let full = random_depth(seed, 0.6);
            let mut sub = full.clone();
            for v in 0..16 {
                for u in 0..20 {
                    if (u + v) % 2 == 0 {
                        sub.set(u, v, None);
                    }
                }
            }
            let count = |d: &DepthMap| {
                embed_depth_occupancy(&[d], &[&cam], &grid()).unwrap().data.iter().filter(|&&x| x > 0.0).count()
            };
            prop_assert!(count(&sub) <= count(&full));
        }
    }
}
