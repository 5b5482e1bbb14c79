use vfusion::geometry::{Camera, Intrinsics, Pose, RigidTransform, Vec3};
use vfusion::mvs::{
    aggregate, build_initial_volume, extract_features, plane_depths, SweepConfig,
    VarianceAggregator,
};
use vfusion::synthetic::{render, Primitive, Scene, Texture};

fn wall(z: f64) -> Scene {
    Scene::new(vec![Primitive::Plane {
        center: [0.0, 0.0, z],
        normal: [0.0, 0.0, -1.0],
        u_axis: [1.0, 0.0, 0.0],
        half_extents: [4.0, 4.0],
        texture: Texture {
            seed: 5,
            scale: 0.05,
        },
    }])
    .unwrap()
}

fn camera_at(x: f64) -> Camera {
    let k = Intrinsics::new(260.0, 260.0, 159.5, 119.5, 320, 240).unwrap();
    Camera::new(
        k,
        Pose::camera_from_world(RigidTransform::from_translation(Vec3::new(-x, 0.0, 0.0))),
    )
}

fn argmax_histogram(z_star: f64, cfg: &SweepConfig) -> (Vec<usize>, usize) {
    let scene = wall(z_star);
    let cams = [camera_at(0.0), camera_at(-0.1), camera_at(0.1)];
    let feats: Vec<_> = cams
        .iter()
        .map(|c| extract_features(&render(&scene, c).unwrap().0, 4).unwrap())
        .collect();
    let small: Vec<Camera> = cams.iter().map(|c| c.downsampled(4).unwrap()).collect();
    let vol = build_initial_volume(
        &feats[0],
        [&feats[1], &feats[2]],
        [&small[0], &small[1], &small[2]],
        cfg,
    )
    .unwrap();
    let (vz, _) = aggregate(&vol, &VarianceAggregator::default()).unwrap();
    let mut hist = vec![0; cfg.planes];
    let mut total = 0;
    for v in 6..vz.height - 6 {
        for u in 10..vz.width - 10 {
            let best = (0..cfg.planes)
                .max_by(|a, b| vz.at(0, *a, v, u).total_cmp(&vz.at(0, *b, v, u)))
                .unwrap();
            hist[best] += 1;
            total += 1;
        }
    }
    (hist, total)
}

#[test]
fn textured_plane_argmax_is_the_nearest_plane() {
    let cfg = SweepConfig {
        planes: 48,
        z_min: 0.5,
    };
    let depths = plane_depths(&cfg);
    for z_star in [1.2, 1.5, 2.0] {
        let nearest = (0..depths.len())
            .min_by(|a, b| {
                (depths[*a] - z_star)
                    .abs()
                    .total_cmp(&(depths[*b] - z_star).abs())
            })
            .unwrap();
        let (hist, total) = argmax_histogram(z_star, &cfg);
        assert!(
            hist[nearest] * 10 >= total * 9,
            "z* {z_star}: nearest plane {nearest} won {} of {total} pixels, histogram {hist:?}",
            hist[nearest]
        );
    }
}
