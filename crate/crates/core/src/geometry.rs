//! Pinhole cameras, rigid poses, plane-induced homographies and the
//! world/voxel coordinate maps shared by every stage of the pipeline.
//!
//! Pixel coordinates put pixel centers on integers: the top-left pixel covers
//! `[-0.5, 0.5]²`. Camera frames are x right, y down, z forward.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance for the orthonormality checks on rotations.
pub const ROTATION_TOL: f64 = 1e-9;

/// Largest deviation from orthonormality that file loaders will silently
/// project back onto SO(3). Text poses carry ~7 significant digits.
pub const ROTATION_REPAIR_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::InvalidArgument(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Result<Mat3> {
        self.matrix()
            .try_inverse()
            .ok_or(Error::Singular("intrinsic matrix"))
    }

    /// Intrinsics of the image obtained by `factor`×`factor` average pooling.
    ///
    /// Output pixel `u'` averages input pixels `factor·u' .. factor·u' + factor - 1`,
    /// so its center sits at `factor·u' + (factor - 1) / 2` in input coordinates.
    pub fn downsampled(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot downsample {}x{} by {factor}",
                self.width, self.height
            )));
        }
        let f = factor as f64;
        let shift = (f - 1.0) / 2.0;
        Self::new(
            self.fx / f,
            self.fy / f,
            (self.cx - shift) / f,
            (self.cy - shift) / f,
            self.width / factor,
            self.height / factor,
        )
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }

    /// Nearest integer pixel, if it lies inside the image.
    pub fn nearest_pixel(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let (ur, vr) = (u.round(), v.round());
        if ur < 0.0 || vr < 0.0 || ur >= self.width as f64 || vr >= self.height as f64 {
            return None;
        }
        Some((ur as usize, vr as usize))
    }
}

/// A pixel position plus the camera-frame depth of the point that produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

pub fn project(p: &Vec3, k: &Intrinsics) -> Result<Projection> {
    if !(p.z > 0.0) {
        return Err(Error::BehindCamera(p.z));
    }
    Ok(Projection {
        u: k.fx * p.x / p.z + k.cx,
        v: k.fy * p.y / p.z + k.cy,
        z: p.z,
    })
}

pub fn backproject(u: f64, v: f64, z: f64, k: &Intrinsics) -> Result<Vec3> {
    if !(z > 0.0) {
        return Err(Error::BehindCamera(z));
    }
    Ok(Vec3::new((u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z))
}

/// Largest entry of `|RᵀR - I|` together with `|det R - 1|`.
pub fn orthonormality_error(r: &Mat3) -> f64 {
    let gram = r.transpose() * r - Mat3::identity();
    let off = gram.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    off.max((r.determinant() - 1.0).abs())
}

pub fn check_rotation(r: &Mat3) -> Result<()> {
    let err = orthonormality_error(r);
    if err > ROTATION_TOL || !err.is_finite() {
        return Err(Error::NotOrthonormal(err));
    }
    Ok(())
}

/// Nearest rotation in the Frobenius sense.
fn project_to_rotation(m: &Mat3) -> Result<Mat3> {
    let svd = m.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Singular("rotation block")),
    };
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    Ok(u * d * vt)
}

pub fn rotation_about_axis(axis: &Vec3, angle_rad: f64) -> Mat3 {
    *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle_rad).matrix()
}

/// `x ↦ R x + t`, mapping points from a source frame to a target frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        check_rotation(&rotation)?;
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("translation"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: t,
        }
    }

    /// Builds a transform from a homogeneous matrix, projecting a slightly
    /// non-orthonormal rotation block onto SO(3).
    pub fn from_matrix4(m: &Matrix4<f64>) -> Result<Self> {
        let r = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t = m.fixed_view::<3, 1>(0, 3).into_owned();
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if (bottom[0].abs() + bottom[1].abs() + bottom[2].abs() + (bottom[3] - 1.0).abs()) > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "bottom row {bottom:?} is not [0 0 0 1]"
            )));
        }
        let err = orthonormality_error(&r);
        let r = if err <= ROTATION_TOL {
            r
        } else if err <= ROTATION_REPAIR_TOL {
            project_to_rotation(&r)?
        } else {
            return Err(Error::NotOrthonormal(err));
        };
        Self::new(r, t)
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: first `other`, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoseConvention {
    CameraFromWorld,
    WorldFromCamera,
}

/// A camera pose with an explicit direction tag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub transform: RigidTransform,
    pub convention: PoseConvention,
}

impl Pose {
    pub fn camera_from_world(transform: RigidTransform) -> Self {
        Self {
            transform,
            convention: PoseConvention::CameraFromWorld,
        }
    }

    pub fn world_from_camera(transform: RigidTransform) -> Self {
        Self {
            transform,
            convention: PoseConvention::WorldFromCamera,
        }
    }

    pub fn identity() -> Self {
        Self::camera_from_world(RigidTransform::identity())
    }

    pub fn to_camera_from_world(&self) -> RigidTransform {
        match self.convention {
            PoseConvention::CameraFromWorld => self.transform,
            PoseConvention::WorldFromCamera => self.transform.inverse(),
        }
    }

    pub fn to_world_from_camera(&self) -> RigidTransform {
        match self.convention {
            PoseConvention::CameraFromWorld => self.transform.inverse(),
            PoseConvention::WorldFromCamera => self.transform,
        }
    }

    /// Camera placed at `eye` looking at `target`; `up` is the world
    /// direction that should appear towards the top of the image.
    pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidArgument("eye and target coincide".into()))?;
        let right = forward.cross(up).try_normalize(1e-12).ok_or_else(|| {
            Error::InvalidArgument("up is parallel to the viewing direction".into())
        })?;
        let down = forward.cross(&right);
        let world_from_cam = Mat3::from_columns(&[right, down, forward]);
        Ok(Self::world_from_camera(RigidTransform::new(
            world_from_cam,
            *eye,
        )?))
    }
}

/// Intrinsics plus pose; the unit every multi-view operation consumes.
#[derive(Clone, Copy, Debug)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    cam_from_world: RigidTransform,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: Pose) -> Self {
        Self {
            intrinsics,
            cam_from_world: pose.to_camera_from_world(),
        }
    }

    pub fn cam_from_world(&self) -> &RigidTransform {
        &self.cam_from_world
    }

    pub fn world_from_cam(&self) -> RigidTransform {
        self.cam_from_world.inverse()
    }

    pub fn pose(&self) -> Pose {
        Pose::camera_from_world(self.cam_from_world)
    }

    pub fn center(&self) -> Vec3 {
        -(self.cam_from_world.rotation().transpose() * self.cam_from_world.translation())
    }

    /// Same pose, intrinsics for an average-pooled image.
    pub fn downsampled(&self, factor: usize) -> Result<Self> {
        Ok(Self {
            intrinsics: self.intrinsics.downsampled(factor)?,
            cam_from_world: self.cam_from_world,
        })
    }

    pub fn project_world(&self, p: &Vec3) -> Result<Projection> {
        project(&self.cam_from_world.apply(p), &self.intrinsics)
    }

    pub fn backproject_world(&self, u: f64, v: f64, z: f64) -> Result<Vec3> {
        Ok(self
            .world_from_cam()
            .apply(&backproject(u, v, z, &self.intrinsics)?))
    }

    /// Transform taking this camera's frame to `other`'s.
    pub fn relative_to(&self, other: &Camera) -> RigidTransform {
        other.cam_from_world.compose(&self.cam_from_world.inverse())
    }
}

/// Homography induced by the fronto-parallel plane `z = depth` of the
/// reference camera: `H = K_src (R + t nᵀ / depth) K_ref⁻¹`, `n = (0, 0, 1)`.
pub fn plane_homography(
    k_ref: &Intrinsics,
    k_src: &Intrinsics,
    ref_to_src: &RigidTransform,
    depth: f64,
) -> Result<Mat3> {
    if !(depth > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "plane depth must be positive, got {depth}"
        )));
    }
    let k_ref_inv = k_ref.inverse_matrix()?;
    let t = ref_to_src.translation();
    let n = Vec3::new(0.0, 0.0, 1.0);
    let induced = ref_to_src.rotation() + t * n.transpose() / depth;
    Ok(k_src.matrix() * induced * k_ref_inv)
}

/// Applies a homography to a pixel; `None` when the image point has
/// non-positive homogeneous scale (the plane point is behind the target).
pub fn apply_homography(h: &Mat3, u: f64, v: f64) -> Option<(f64, f64)> {
    let x = h * Vec3::new(u, v, 1.0);
    if x.z > 0.0 {
        Some((x.x / x.z, x.y / x.z))
    } else {
        None
    }
}

/// Axis-aligned voxel lattice. Voxel `(i, j, k)` has its center at
/// `origin + pitch · (i, j, k)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridSpec {
    pub origin: [f64; 3],
    pub pitch: f64,
    pub dims: [usize; 3],
}

impl VoxelGridSpec {
    pub fn new(origin: [f64; 3], pitch: f64, dims: [usize; 3]) -> Result<Self> {
        let spec = Self {
            origin,
            pitch,
            dims,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pitch > 0.0) || !self.pitch.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "voxel pitch must be positive, got {}",
                self.pitch
            )));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "grid dims must be >= 1, got {:?}",
                self.dims
            )));
        }
        if !self.origin.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("grid origin"));
        }
        Ok(())
    }

    /// Grid whose voxel centers cover the box `[min, max]` at `pitch`.
    pub fn covering(min: &Vec3, max: &Vec3, pitch: f64) -> Result<Self> {
        let mut dims = [0usize; 3];
        for a in 0..3 {
            dims[a] = (((max[a] - min[a]) / pitch).ceil() as usize + 1).max(1);
        }
        Self::new([min.x, min.y, min.z], pitch, dims)
    }

    pub fn origin(&self) -> Vec3 {
        Vec3::from(self.origin)
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn world_to_voxel(&self, p: &Vec3) -> Vec3 {
        (p - self.origin()) / self.pitch
    }

    pub fn voxel_to_world(&self, ijk: &Vec3) -> Vec3 {
        self.origin() + ijk * self.pitch
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.voxel_to_world(&Vec3::new(i as f64, j as f64, k as f64))
    }

    /// Nearest voxel to a continuous coordinate, if inside the grid.
    pub fn nearest_voxel(&self, ijk: &Vec3) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let r = ijk[a].round();
            if !(r >= 0.0 && r < self.dims[a] as f64) {
                return None;
            }
            out[a] = r as usize;
        }
        Some(out)
    }

    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn unravel(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let j = (idx / self.dims[2]) % self.dims[1];
        let i = idx / (self.dims[1] * self.dims[2]);
        [i, j, k]
    }

    /// World-space box spanned by the voxel centers.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let lo = self.origin();
        let hi = self.voxel_center(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1);
        (lo, hi)
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

fn parse_numbers(text: &str, what: &'static str, path: &Path) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|e| Error::format(what, path, format!("bad number {tok:?}: {e}")))
        })
        .collect()
}

/// Reads a 4×4 row-major camera-to-world matrix.
pub fn read_pose_file(path: &Path) -> Result<Pose> {
    let nums = parse_numbers(&read_text(path)?, "pose", path)?;
    if nums.len() != 16 {
        return Err(Error::format(
            "pose",
            path,
            format!("expected 16 numbers, found {}", nums.len()),
        ));
    }
    if !nums.iter().all(|x| x.is_finite()) {
        return Err(Error::format("pose", path, "non-finite entry"));
    }
    let m = Matrix4::from_row_slice(&nums);
    let t =
        RigidTransform::from_matrix4(&m).map_err(|e| Error::format("pose", path, e.to_string()))?;
    Ok(Pose::world_from_camera(t))
}

pub fn write_pose_file(path: &Path, pose: &Pose) -> Result<()> {
    let m = pose.to_world_from_camera().to_matrix4();
    let mut out = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{:e}", m[(r, c)])).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads `fx fy cx cy width height`.
pub fn read_intrinsics_file(path: &Path) -> Result<Intrinsics> {
    let nums = parse_numbers(&read_text(path)?, "intrinsics", path)?;
    if nums.len() != 6 {
        return Err(Error::format(
            "intrinsics",
            path,
            format!("expected 6 numbers, found {}", nums.len()),
        ));
    }
    let dim = |x: f64| -> Result<usize> {
        if x >= 1.0 && x.fract() == 0.0 {
            Ok(x as usize)
        } else {
            Err(Error::format(
                "intrinsics",
                path,
                format!("bad image dimension {x}"),
            ))
        }
    };
    Intrinsics::new(
        nums[0],
        nums[1],
        nums[2],
        nums[3],
        dim(nums[4])?,
        dim(nums[5])?,
    )
    .map_err(|e| Error::format("intrinsics", path, e.to_string()))
}

pub fn write_intrinsics_file(path: &Path, k: &Intrinsics) -> Result<()> {
    let text = format!(
        "{:e} {:e} {:e} {:e} {} {}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height
    );
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
