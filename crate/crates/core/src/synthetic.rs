//! Analytic test scenes: ray-cast rendering, exact signed distances and
//! camera trajectories.
//!
//! World "up" is `-y`, matching image rows increasing downwards.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    write_intrinsics_file, write_pose_file, Camera, Intrinsics, Pose, Vec3, VoxelGridSpec,
};
use crate::pipeline::DatasetLayout;
use crate::raster::{DepthMap, GrayImage};
use crate::tsdf::TsdfVolume;

pub const WORLD_UP: [f64; 3] = [0.0, -1.0, 0.0];
const HIT_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Texture {
    pub seed: u64,
    /// Size of the coarsest noise cell in meters.
    pub scale: f64,
}

impl Default for Texture {
    fn default() -> Self {
        Self {
            seed: 0,
            scale: 0.08,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Primitive {
    /// Finite rectangle spanned by `u_axis` and `normal × u_axis`.
    Plane {
        center: [f64; 3],
        normal: [f64; 3],
        u_axis: [f64; 3],
        half_extents: [f64; 2],
        #[serde(default)]
        texture: Texture,
    },
    /// Axis-aligned box.
    Box {
        min: [f64; 3],
        max: [f64; 3],
        #[serde(default)]
        texture: Texture,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        #[serde(default)]
        texture: Texture,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&o.min),
            max: self.max.sup(&o.max),
        }
    }

    pub fn contains(&self, o: &Aabb) -> bool {
        (0..3).all(|a| self.min[a] <= o.min[a] && self.max[a] >= o.max[a])
    }
}

struct Hit {
    t: f64,
    normal: Vec3,
}

/// Orthonormal in-plane frame of a plane primitive.
fn plane_frame(normal: &[f64; 3], u_axis: &[f64; 3]) -> Result<(Vec3, Vec3, Vec3)> {
    let n = Vec3::from(*normal)
        .try_normalize(1e-12)
        .ok_or_else(|| Error::InvalidArgument("plane normal is zero".into()))?;
    let u = Vec3::from(*u_axis);
    let u = (u - n * n.dot(&u))
        .try_normalize(1e-12)
        .ok_or_else(|| Error::InvalidArgument("plane u_axis is parallel to its normal".into()))?;
    Ok((n, u, n.cross(&u)))
}

impl Primitive {
    pub fn validate(&self) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let tex = self.texture();
        if !(tex.scale > 0.0) {
            return Err(Error::InvalidArgument(
                "texture scale must be positive".into(),
            ));
        }
        match self {
            Primitive::Plane {
                center,
                normal,
                u_axis,
                half_extents,
                ..
            } => {
                if !finite(center)
                    || !finite(half_extents)
                    || half_extents.iter().any(|&h| h <= 0.0)
                {
                    return Err(Error::InvalidArgument(
                        "plane needs a finite center and positive extents".into(),
                    ));
                }
                plane_frame(normal, u_axis).map(|_| ())
            }
            Primitive::Box { min, max, .. } => {
                if !finite(min) || !finite(max) || (0..3).any(|a| min[a] >= max[a]) {
                    return Err(Error::InvalidArgument(
                        "box needs min < max on every axis".into(),
                    ));
                }
                Ok(())
            }
            Primitive::Sphere { center, radius, .. } => {
                if !finite(center) || !(*radius > 0.0) || !radius.is_finite() {
                    return Err(Error::InvalidArgument(
                        "sphere needs a finite center and positive radius".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn texture(&self) -> Texture {
        match self {
            Primitive::Plane { texture, .. }
            | Primitive::Box { texture, .. }
            | Primitive::Sphere { texture, .. } => *texture,
        }
    }

    pub fn aabb(&self) -> Aabb {
        match self {
            Primitive::Plane {
                center,
                normal,
                u_axis,
                half_extents,
                ..
            } => {
                let (_, u, v) = plane_frame(normal, u_axis).expect("validated plane");
                let c = Vec3::from(*center);
                let e = u.abs() * half_extents[0] + v.abs() * half_extents[1];
                Aabb {
                    min: c - e,
                    max: c + e,
                }
            }
            Primitive::Box { min, max, .. } => Aabb {
                min: Vec3::from(*min),
                max: Vec3::from(*max),
            },
            Primitive::Sphere { center, radius, .. } => {
                let c = Vec3::from(*center);
                let r = Vec3::repeat(*radius);
                Aabb {
                    min: c - r,
                    max: c + r,
                }
            }
        }
    }

    /// Nearest intersection of `o + t d` with `t > 0`.
    fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<Hit> {
        match self {
            Primitive::Plane {
                center,
                normal,
                u_axis,
                half_extents,
                ..
            } => {
                let (n, u, v) = plane_frame(normal, u_axis).ok()?;
                let c = Vec3::from(*center);
                let denom = n.dot(d);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = n.dot(&(c - o)) / denom;
                if t <= HIT_EPS {
                    return None;
                }
                let q = o + d * t - c;
                (q.dot(&u).abs() <= half_extents[0] && q.dot(&v).abs() <= half_extents[1])
                    .then_some(Hit { t, normal: n })
            }
            Primitive::Box { min, max, .. } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut a0, mut a1) = (0usize, 0usize);
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        a0 = a;
                    }
                    if tb < t1 {
                        t1 = tb;
                        a1 = a;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                let (t, axis) = if t0 > HIT_EPS {
                    (t0, a0)
                } else if t1 > HIT_EPS {
                    (t1, a1)
                } else {
                    return None;
                };
                let mut normal = Vec3::zeros();
                normal[axis] = 1.0;
                Some(Hit { t, normal })
            }
            Primitive::Sphere { center, radius, .. } => {
                let c = Vec3::from(*center);
                let oc = o - c;
                let a = d.norm_squared();
                let b = d.dot(&oc);
                let cc = oc.norm_squared() - radius * radius;
                let disc = b * b - a * cc;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = [(-b - s) / a, (-b + s) / a]
                    .into_iter()
                    .find(|&t| t > HIT_EPS)?;
                Some(Hit {
                    t,
                    normal: (o + d * t - c) / *radius,
                })
            }
        }
    }

    /// Exact signed distance in meters, negative inside (or behind a plane).
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        match self {
            Primitive::Plane {
                center,
                normal,
                u_axis,
                half_extents,
                ..
            } => {
                let (n, u, v) = plane_frame(normal, u_axis).expect("validated plane");
                let q = p - Vec3::from(*center);
                let s = q.dot(&n);
                let da = (q.dot(&u).abs() - half_extents[0]).max(0.0);
                let db = (q.dot(&v).abs() - half_extents[1]).max(0.0);
                let dist = (da * da + db * db + s * s).sqrt();
                if s < 0.0 {
                    -dist
                } else {
                    dist
                }
            }
            Primitive::Box { min, max, .. } => {
                let (lo, hi) = (Vec3::from(*min), Vec3::from(*max));
                let c = (lo + hi) / 2.0;
                let h = (hi - lo) / 2.0;
                let q = (p - c).abs() - h;
                let outside = q.sup(&Vec3::zeros()).norm();
                let inside = q.max().min(0.0);
                outside + inside
            }
            Primitive::Sphere { center, radius, .. } => (p - Vec3::from(*center)).norm() - radius,
        }
    }

    /// Points on the surface at roughly `spacing` meters apart.
    fn surface_points(&self, spacing: f64) -> Vec<Vec3> {
        let grid = |c: Vec3, u: Vec3, v: Vec3, hu: f64, hv: f64| -> Vec<Vec3> {
            let nu = ((2.0 * hu / spacing).ceil() as usize).max(1);
            let nv = ((2.0 * hv / spacing).ceil() as usize).max(1);
            let mut out = Vec::with_capacity((nu + 1) * (nv + 1));
            for i in 0..=nu {
                for j in 0..=nv {
                    let a = -hu + 2.0 * hu * i as f64 / nu as f64;
                    let b = -hv + 2.0 * hv * j as f64 / nv as f64;
                    out.push(c + u * a + v * b);
                }
            }
            out
        };
        match self {
            Primitive::Plane {
                center,
                normal,
                u_axis,
                half_extents,
                ..
            } => {
                let (_, u, v) = plane_frame(normal, u_axis).expect("validated plane");
                grid(Vec3::from(*center), u, v, half_extents[0], half_extents[1])
            }
            Primitive::Box { min, max, .. } => {
                let (lo, hi) = (Vec3::from(*min), Vec3::from(*max));
                let c = (lo + hi) / 2.0;
                let h = (hi - lo) / 2.0;
                let mut out = Vec::new();
                for a in 0..3 {
                    let (b, cc) = ((a + 1) % 3, (a + 2) % 3);
                    let mut eb = Vec3::zeros();
                    eb[b] = 1.0;
                    let mut ec = Vec3::zeros();
                    ec[cc] = 1.0;
                    for s in [-1.0, 1.0] {
                        let mut fc = c;
                        fc[a] += s * h[a];
                        out.extend(grid(fc, eb, ec, h[b], h[cc]));
                    }
                }
                out
            }
            Primitive::Sphere { center, radius, .. } => {
                let c = Vec3::from(*center);
                let n =
                    ((4.0 * std::f64::consts::PI * radius * radius / (spacing * spacing)).ceil()
                        as usize)
                        .max(1);
                let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
                (0..n)
                    .map(|i| {
                        let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                        let r = (1.0 - y * y).sqrt();
                        let th = golden * i as f64;
                        c + Vec3::new(r * th.cos(), y, r * th.sin()) * *radius
                    })
                    .collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub bounds: Aabb,
}

impl Scene {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        let first = primitives.first().ok_or(Error::Empty("scene primitives"))?;
        for p in &primitives {
            p.validate()?;
        }
        let bounds = primitives
            .iter()
            .skip(1)
            .fold(first.aabb(), |b, p| b.union(&p.aabb()));
        Ok(Self { primitives, bounds })
    }

    /// Signed distance to the union of all primitives.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.primitives
            .iter()
            .map(|q| q.signed_distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Surface samples of the union: primitive samples not buried inside
    /// another primitive.
    pub fn surface_points(&self, spacing: f64) -> Vec<[f64; 3]> {
        self.primitives
            .iter()
            .flat_map(|p| p.surface_points(spacing))
            .filter(|p| self.signed_distance(p) > -1e-9)
            .map(|p| [p.x, p.y, p.z])
            .collect()
    }

    fn shade(&self, prim: &Primitive, p: &Vec3, normal: &Vec3, view_dir: &Vec3) -> f64 {
        let n = if normal.dot(view_dir) > 0.0 {
            -normal
        } else {
            *normal
        };
        let light = Vec3::new(0.3, -1.0, -0.6).normalize();
        let lambert = n.dot(&light).max(0.0);
        let tex = prim.texture();
        let albedo = 0.1 + 0.8 * texture_value(&tex, p);
        albedo * (0.35 + 0.65 * lambert)
    }
}

fn hash3(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [x, y, z] {
        h = h.wrapping_add(v as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 29;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, p: &Vec3) -> f64 {
    let f = p.map(f64::floor);
    let t = (p - f).map(|x| x * x * (3.0 - 2.0 * x));
    let (ix, iy, iz) = (f.x as i64, f.y as i64, f.z as i64);
    let mut acc = 0.0;
    for c in 0..8 {
        let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
        let w = (if dx == 1 { t.x } else { 1.0 - t.x })
            * (if dy == 1 { t.y } else { 1.0 - t.y })
            * (if dz == 1 { t.z } else { 1.0 - t.z });
        acc += w * hash3(seed, ix + dx as i64, iy + dy as i64, iz + dz as i64);
    }
    acc
}

/// View-independent albedo in [0, 1] from world position.
pub fn texture_value(tex: &Texture, p: &Vec3) -> f64 {
    let coarse = value_noise(tex.seed, &(p / tex.scale));
    let fine = value_noise(tex.seed.wrapping_add(1), &(p / (tex.scale * 0.4)));
    0.6 * coarse + 0.4 * fine
}

/// Ray-casts the scene. Misses get zero intensity and invalid depth.
pub fn render(scene: &Scene, cam: &Camera) -> Result<(GrayImage, DepthMap)> {
    let k = &cam.intrinsics;
    let wfc = cam.world_from_cam();
    let o = cam.center();
    let rows: Vec<Vec<(f64, Option<f64>)>> = (0..k.height)
        .into_par_iter()
        .map(|v| {
            (0..k.width)
                .map(|u| {
                    // camera-frame direction with unit z, so the hit parameter
                    // is the camera depth
                    let dc = Vec3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
                    let d = wfc.rotation() * dc;
                    let best = scene
                        .primitives
                        .iter()
                        .filter_map(|p| p.intersect(&o, &d).map(|h| (p, h)))
                        .min_by(|a, b| a.1.t.total_cmp(&b.1.t));
                    match best {
                        Some((p, h)) => {
                            let x = o + d * h.t;
                            (scene.shade(p, &x, &h.normal, &d), Some(h.t))
                        }
                        None => (0.0, None),
                    }
                })
                .collect()
        })
        .collect();
    let mut img = GrayImage::new(k.width, k.height);
    let mut depth = DepthMap::invalid(k.width, k.height);
    for (v, row) in rows.into_iter().enumerate() {
        for (u, (i, z)) in row.into_iter().enumerate() {
            img.data[v * k.width + u] = i;
            depth.set(u, v, z);
        }
    }
    Ok((img, depth))
}

/// Exact signed distance to the scene, truncated at `mu` and normalized.
pub fn analytic_tsdf(scene: &Scene, spec: &VoxelGridSpec, mu: f64) -> Result<TsdfVolume> {
    TsdfVolume::from_sdf(*spec, mu, |p| scene.signed_distance(p))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryParams {
    pub center: [f64; 3],
    pub radius: f64,
    pub n: usize,
    pub elevation_deg: f64,
    #[serde(default)]
    pub start_deg: f64,
    /// Azimuth step between consecutive cameras; `None` spreads the cameras
    /// over a full circle.
    #[serde(default)]
    pub step_deg: Option<f64>,
}

impl TrajectoryParams {
    pub fn step(&self) -> f64 {
        self.step_deg.unwrap_or(360.0 / self.n.max(1) as f64)
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
    pub params: TrajectoryParams,
}

/// Cameras on a horizontal circle around `center`, all looking at it.
/// Azimuth 0 places the camera on the `-z` side; elevation raises it.
pub fn arc_trajectory(params: TrajectoryParams) -> Result<Trajectory> {
    if params.n == 0 {
        return Err(Error::InvalidArgument(
            "trajectory needs at least one camera".into(),
        ));
    }
    if !(params.radius > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "orbit radius must be positive, got {}",
            params.radius
        )));
    }
    if params.elevation_deg.abs() >= 89.0 {
        return Err(Error::InvalidArgument(
            "elevation must be within (-89, 89) degrees".into(),
        ));
    }
    let c = Vec3::from(params.center);
    let el = params.elevation_deg.to_radians();
    let poses = (0..params.n)
        .map(|i| {
            let az = (params.start_deg + params.step() * i as f64).to_radians();
            let eye =
                c + Vec3::new(el.cos() * az.sin(), -el.sin(), -el.cos() * az.cos()) * params.radius;
            Pose::look_at(&eye, &c, &Vec3::from(WORLD_UP))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory { poses, params })
}

pub fn orbit_trajectory(
    center: [f64; 3],
    radius: f64,
    n: usize,
    elevation_deg: f64,
) -> Result<Trajectory> {
    arc_trajectory(TrajectoryParams {
        center,
        radius,
        n,
        elevation_deg,
        start_deg: 0.0,
        step_deg: None,
    })
}

/// Declarative scene file: primitives, camera and trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDescription {
    pub primitives: Vec<Primitive>,
    pub intrinsics: Intrinsics,
    pub trajectory: TrajectoryParams,
}

impl SceneDescription {
    pub fn scene(&self) -> Result<Scene> {
        Scene::new(self.primitives.clone())
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        self.intrinsics.validate()?;
        Ok(arc_trajectory(self.trajectory)?
            .poses
            .into_iter()
            .map(|p| Camera::new(self.intrinsics, p))
            .collect())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("scene description: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene description serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Unit sphere-ish target for orbit tests: radius 0.5 at the origin.
pub fn sphere_orbit(views: usize) -> SceneDescription {
    SceneDescription {
        primitives: vec![Primitive::Sphere {
            center: [0.0; 3],
            radius: 0.5,
            texture: Texture {
                seed: 7,
                scale: 0.08,
            },
        }],
        intrinsics: Intrinsics::new(260.0, 260.0, 159.5, 119.5, 320, 240)
            .expect("valid intrinsics"),
        trajectory: TrajectoryParams {
            center: [0.0; 3],
            radius: 1.8,
            n: views,
            elevation_deg: 0.0,
            start_deg: 0.0,
            step_deg: None,
        },
    }
}

/// A back wall and a floor seen from a 12-view, 10-degree arc.
pub fn two_plane_room() -> SceneDescription {
    SceneDescription {
        primitives: vec![
            Primitive::Plane {
                center: [0.0, -0.2, 1.2],
                normal: [0.0, 0.0, -1.0],
                u_axis: [1.0, 0.0, 0.0],
                half_extents: [2.5, 1.0],
                texture: Texture {
                    seed: 11,
                    scale: 0.08,
                },
            },
            Primitive::Plane {
                center: [0.0, 0.6, 0.0],
                normal: [0.0, -1.0, 0.0],
                u_axis: [1.0, 0.0, 0.0],
                half_extents: [2.5, 1.2],
                texture: Texture {
                    seed: 23,
                    scale: 0.08,
                },
            },
        ],
        intrinsics: Intrinsics::new(520.0, 520.0, 319.5, 239.5, 640, 480)
            .expect("valid intrinsics"),
        trajectory: TrajectoryParams {
            center: [0.0, 0.1, 0.6],
            radius: 1.2,
            n: 12,
            elevation_deg: 15.0,
            start_deg: -55.0,
            step_deg: Some(10.0),
        },
    }
}

/// Renders every camera and writes the dataset layout under `root`.
pub fn write_dataset(desc: &SceneDescription, root: &Path) -> Result<Vec<Camera>> {
    let scene = desc.scene()?;
    let cams = desc.cameras()?;
    let layout = DatasetLayout::new(root);
    layout.create_dirs()?;
    write_intrinsics_file(&layout.intrinsics(), &desc.intrinsics)?;
    for (i, cam) in cams.iter().enumerate() {
        let (img, depth) = render(&scene, cam)?;
        img.to_png(&layout.color(i))?;
        depth.to_png_mm(&layout.depth(i))?;
        write_pose_file(&layout.pose(i), &cam.pose())?;
    }
    let scene_path = root.join("scene.json");
    std::fs::write(&scene_path, desc.to_json()).map_err(|e| Error::io(&scene_path, e))?;
    Ok(cams)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k() -> Intrinsics {
        Intrinsics::new(50.0, 50.0, 15.5, 11.5, 32, 24).unwrap()
    }

    fn wall(z: f64) -> Primitive {
        Primitive::Plane {
            center: [0.0, 0.0, z],
            normal: [0.0, 0.0, -1.0],
            u_axis: [1.0, 0.0, 0.0],
            half_extents: [10.0, 10.0],
            texture: Texture::default(),
        }
    }

    fn sphere(c: [f64; 3], r: f64) -> Primitive {
        Primitive::Sphere {
            center: c,
            radius: r,
            texture: Texture::default(),
        }
    }

    #[test]
    fn fronto_parallel_plane_has_constant_depth() {
        let s = Scene::new(vec![wall(2.0)]).unwrap();
        let (_, d) = render(&s, &Camera::new(k(), Pose::identity())).unwrap();
        assert_eq!(d.valid_count(), 32 * 24);
        assert!(d.data.iter().all(|&z| (z - 2.0).abs() < 1e-12));
    }

    #[test]
    fn sphere_center_depth_and_misses() {
        let kk = Intrinsics::new(50.0, 50.0, 16.0, 12.0, 33, 25).unwrap();
        let s = Scene::new(vec![sphere([0.0, 0.0, 2.0], 0.5)]).unwrap();
        let (img, d) = render(&s, &Camera::new(kk, Pose::identity())).unwrap();
        assert!((d.get(16, 12).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(d.get(0, 0), None);
        assert_eq!(img.at(0, 0), 0.0);
        assert!(img.at(16, 12) > 0.0);
    }

    #[test]
    fn rendered_depth_matches_analytic_distance() {
        let s = Scene::new(vec![sphere([0.1, -0.05, 2.0], 0.6), wall(2.4)]).unwrap();
        let pose = Pose::look_at(
            &Vec3::new(0.3, -0.2, -0.1),
            &Vec3::new(0.0, 0.0, 2.0),
            &Vec3::from(WORLD_UP),
        )
        .unwrap();
        let cam = Camera::new(k(), pose);
        let (_, d) = render(&s, &cam).unwrap();
        for v in 0..24 {
            for u in 0..32 {
                if let Some(z) = d.get(u, v) {
                    let p = cam.backproject_world(u as f64, v as f64, z).unwrap();
                    assert!(s.signed_distance(&p).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let s = Scene::new(vec![sphere([0.0, 0.0, 2.0], 0.7)]).unwrap();
        let cam = Camera::new(k(), Pose::identity());
        assert_eq!(render(&s, &cam).unwrap(), render(&s, &cam).unwrap());
    }

    #[test]
    fn analytic_tsdf_examples() {
        let s = Scene::new(vec![sphere([0.0; 3], 0.5)]).unwrap();
        let spec = VoxelGridSpec::new([-0.56, 0.0, 0.0], 0.02, [57, 1, 1]).unwrap();
        let t = analytic_tsdf(&s, &spec, 0.12).unwrap();
        let at = |x: f64| t.values[((x + 0.56) / 0.02).round() as usize];
        assert_eq!(at(0.0), -1.0);
        assert!(at(0.5).abs() < 1e-12);
        assert!((at(-0.56) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn orbit_examples() {
        let c = [0.1, 0.2, 0.3];
        let t = orbit_trajectory(c, 2.0, 4, 10.0).unwrap();
        assert_eq!(t.poses.len(), 4);
        for p in &t.poses {
            let cam = Camera::new(k(), *p);
            let ctr = Vec3::from(c);
            assert!(((cam.center() - ctr).norm() - 2.0).abs() < 1e-12);
            let pc = cam.cam_from_world().apply(&ctr);
            assert!(pc.x.abs() < 1e-9 && pc.y.abs() < 1e-9 && pc.z > 0.0);
        }
        for w in t.poses.windows(2) {
            let r = w[1].to_camera_from_world().rotation()
                * w[0].to_camera_from_world().rotation().transpose();
            let angle = ((r.trace() - 1.0) / 2.0)
                .clamp(-1.0, 1.0)
                .acos()
                .to_degrees();
            assert!(angle <= 90.0 + 1e-9);
        }
        assert_eq!(orbit_trajectory(c, 2.0, 1, 0.0).unwrap().poses.len(), 1);
        assert!(orbit_trajectory(c, 0.0, 4, 0.0).is_err());
        assert!(orbit_trajectory(c, 1.0, 0, 0.0).is_err());
    }

    #[test]
    fn scene_validation() {
        assert!(Scene::new(vec![]).is_err());
        assert!(Scene::new(vec![sphere([0.0; 3], -1.0)]).is_err());
        let s = Scene::new(vec![sphere([0.0; 3], 0.5), wall(2.0)]).unwrap();
        for p in &s.primitives {
            assert!(s.bounds.contains(&p.aabb()));
        }
    }

    #[test]
    fn description_json_round_trip() {
        let d = two_plane_room();
        assert_eq!(SceneDescription::from_json(&d.to_json()).unwrap(), d);
        assert!(SceneDescription::from_json("{\"primitives\": []}").is_err());
    }

    #[test]
    fn surface_points_lie_on_surface() {
        let s = Scene::new(two_plane_room().primitives).unwrap();
        let pts = s.surface_points(0.05);
        assert!(pts.len() > 1000);
        for p in pts {
            assert!(s.signed_distance(&Vec3::from(p)).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn box_hit_lies_on_box(x in -0.3f64..0.3, y in -0.3f64..0.3) {
            let b = Primitive::Box { min: [-0.4, -0.3, 1.0], max: [0.5, 0.2, 1.6], texture: Texture::default() };
            let d = Vec3::new(x, y, 1.0);
            if let Some(h) = b.intersect(&Vec3::zeros(), &d) {
                prop_assert!(b.signed_distance(&(d * h.t)).abs() < 1e-9);
            }
        }
    }
}
