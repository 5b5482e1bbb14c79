//! Rotation-aware 3D convolution.
//!
//! A reservoir kernel `W` of shape `[c_out, c_in, w, w, w]` is resampled per
//! camera so that its axes follow the camera orientation, then applied to the
//! back-projected feature volume of that camera. Kernel axes `(a, b, c)` run
//! along the voxel axes `(i, j, k)`.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{check_rotation, Mat3, Vec3};
use crate::volume::SceneVolume;

const KERNEL_MAGIC: i32 = 0x4b52_4656; // "VFRK" little-endian
const KERNEL_VERSION: i32 = 1;
const SNAP_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct ReservoirKernel {
    pub c_out: usize,
    pub c_in: usize,
    pub size: usize,
    /// `((o * c_in + i) * w + a) * w * w + b * w + c`
    pub weights: Vec<f64>,
}

impl ReservoirKernel {
    pub fn new(c_out: usize, c_in: usize, size: usize, weights: Vec<f64>) -> Result<Self> {
        check_size(size)?;
        if c_out == 0 || c_in == 0 {
            return Err(Error::InvalidArgument(
                "kernel channel counts must be positive".into(),
            ));
        }
        if weights.len() != c_out * c_in * size.pow(3) {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for a [{c_out}, {c_in}, {size}, {size}, {size}] kernel",
                weights.len()
            )));
        }
        if !weights.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("kernel weights"));
        }
        Ok(Self {
            c_out,
            c_in,
            size,
            weights,
        })
    }

    /// Gaussian weights scaled by `1/sqrt(c_in * w^3)`, rounded to f32 so the
    /// kernel survives a save/load cycle unchanged.
    pub fn seeded(c_out: usize, c_in: usize, size: usize, seed: u64) -> Result<Self> {
        check_size(size)?;
        let n = c_out * c_in * size.pow(3);
        let scale = 1.0 / ((c_in * size.pow(3)) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..n)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                (g * scale) as f32 as f64
            })
            .collect();
        Self::new(c_out, c_in, size, weights)
    }

    pub fn taps(&self) -> usize {
        self.size.pow(3)
    }

    pub fn slice(&self, o: usize, i: usize) -> &[f64] {
        let t = self.taps();
        let start = (o * self.c_in + i) * t;
        &self.weights[start..start + t]
    }

    pub fn at(&self, o: usize, i: usize, v: [usize; 3]) -> f64 {
        let w = self.size;
        self.slice(o, i)[(v[0] * w + v[1]) * w + v[2]]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 4 * self.weights.len());
        let header = [
            KERNEL_MAGIC,
            KERNEL_VERSION,
            self.c_out as i32,
            self.c_in as i32,
            self.size as i32,
            0,
            0,
            0,
        ];
        for h in header {
            out.extend_from_slice(&h.to_le_bytes());
        }
        for w in &self.weights {
            out.extend_from_slice(&(*w as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format("kernel", path, reason);
        if bytes.len() < 32 {
            return Err(bad("truncated header".into()));
        }
        let h = |i: usize| i32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        if h(0) != KERNEL_MAGIC {
            return Err(bad("bad magic".into()));
        }
        if h(1) != KERNEL_VERSION {
            return Err(bad(format!("unsupported version {}", h(1))));
        }
        if h(2) <= 0 || h(3) <= 0 || h(4) <= 0 {
            return Err(bad("non-positive dimension".into()));
        }
        let (c_out, c_in, size) = (h(2) as usize, h(3) as usize, h(4) as usize);
        let expect = c_out
            .checked_mul(c_in)
            .and_then(|n| n.checked_mul(size.pow(3)))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad("header sizes overflow".into()))?;
        let body = &bytes[32..];
        if body.len() != expect {
            return Err(bad(format!(
                "{} payload bytes, header implies {expect}",
                body.len()
            )));
        }
        let weights = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::new(c_out, c_in, size, weights).map_err(|e| bad(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Missing(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_bytes(&bytes, path)
    }
}

fn check_size(w: usize) -> Result<()> {
    if w < 3 || w % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel size must be odd and at least 3, got {w}"
        )));
    }
    Ok(())
}

/// A kernel resampled under a rotation. `rotation` is the matrix applied to
/// target offsets to find their source location in the reservoir.
#[derive(Clone, Debug, PartialEq)]
pub struct RotatedKernel {
    pub kernel: ReservoirKernel,
    pub rotation: Mat3,
}

/// Where one target voxel of a rotated kernel was sampled from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSample {
    pub target: [usize; 3],
    /// Rotated location before any clamping, in voxel units.
    pub rotated: [f64; 3],
    /// Location actually sampled.
    pub source: [f64; 3],
    pub clamped: bool,
}

impl KernelSample {
    pub fn in_cube(&self, w: usize) -> bool {
        let hi = (w - 1) as f64;
        self.source.iter().all(|&x| (0.0..=hi).contains(&x))
    }
}

/// Maps a voxel to the unit-norm direction from the kernel center. The
/// center itself maps to the origin.
pub fn norm(v: [usize; 3], w: usize) -> Result<[f64; 3]> {
    if v.iter().any(|&x| x >= w) {
        return Err(Error::InvalidArgument(format!(
            "voxel {v:?} outside a kernel of size {w}"
        )));
    }
    let r = (w / 2) as f64;
    let o = [v[0] as f64 - r, v[1] as f64 - r, v[2] as f64 - r];
    let len = (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt();
    if len == 0.0 {
        return Ok([0.0; 3]);
    }
    Ok([o[0] / len, o[1] / len, o[2] / len])
}

/// Scales a direction back to the radius of `v` and re-centers it.
pub fn denorm(v: [usize; 3], w: usize, s: [f64; 3]) -> [f64; 3] {
    let r = (w / 2) as f64;
    let o = [v[0] as f64 - r, v[1] as f64 - r, v[2] as f64 - r];
    let len = (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt();
    [len * s[0] + r, len * s[1] + r, len * s[2] + r]
}

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= SNAP_TOL {
        r
    } else {
        x
    }
}

/// Up to 8 trilinear taps `(flat index, weight)` into a `w^3` lattice. Taps
/// outside the lattice are dropped, which treats the kernel as zero there.
fn trilinear_taps(p: [f64; 3], w: usize) -> Vec<(usize, f64)> {
    let mut axes = [[(0usize, 0.0f64); 2]; 3];
    let mut counts = [0usize; 3];
    for ax in 0..3 {
        let x = p[ax];
        let x0 = x.floor();
        let f = x - x0;
        for (off, wt) in [(0.0, 1.0 - f), (1.0, f)] {
            let xi = x0 + off;
            if wt != 0.0 && xi >= 0.0 && xi <= (w - 1) as f64 {
                axes[ax][counts[ax]] = (xi as usize, wt);
                counts[ax] += 1;
            }
        }
    }
    let mut taps = Vec::with_capacity(8);
    for &(a, wa) in &axes[0][..counts[0]] {
        for &(b, wb) in &axes[1][..counts[1]] {
            for &(c, wc) in &axes[2][..counts[2]] {
                taps.push(((a * w + b) * w + c, wa * wb * wc));
            }
        }
    }
    taps
}

fn resample(w: &ReservoirKernel, rotation: Mat3, samples: &[KernelSample]) -> RotatedKernel {
    let taps: Vec<Vec<(usize, f64)>> = samples
        .iter()
        .map(|s| trilinear_taps(s.source, w.size))
        .collect();
    let t = w.taps();
    let mut weights = vec![0.0; w.weights.len()];
    for (dst, src) in weights.chunks_exact_mut(t).zip(w.weights.chunks_exact(t)) {
        for (d, tp) in dst.iter_mut().zip(&taps) {
            *d = tp.iter().map(|&(idx, wt)| wt * src[idx]).sum();
        }
    }
    RotatedKernel {
        kernel: ReservoirKernel {
            c_out: w.c_out,
            c_in: w.c_in,
            size: w.size,
            weights,
        },
        rotation,
    }
}

fn lattice(w: usize) -> impl Iterator<Item = [usize; 3]> {
    (0..w).flat_map(move |a| (0..w).flat_map(move |b| (0..w).map(move |c| [a, b, c])))
}

/// Radius-preserving resampling: each target voxel looks up the reservoir
/// at `denorm(v, w, R_inv * norm(v))`.
pub fn rotate_kernel_discrete_traced(
    w: &ReservoirKernel,
    r_inv: &Mat3,
) -> Result<(RotatedKernel, Vec<KernelSample>)> {
    check_rotation(r_inv)?;
    let mut samples = Vec::with_capacity(w.taps());
    for v in lattice(w.size) {
        let s = norm(v, w.size)?;
        let rs = r_inv * Vec3::new(s[0], s[1], s[2]);
        let p = denorm(v, w.size, [rs.x, rs.y, rs.z]).map(snap);
        samples.push(KernelSample {
            target: v,
            rotated: p,
            source: p,
            clamped: false,
        });
    }
    Ok((resample(w, *r_inv, &samples), samples))
}

pub fn rotate_kernel_discrete(w: &ReservoirKernel, r_inv: &Mat3) -> Result<RotatedKernel> {
    rotate_kernel_discrete_traced(w, r_inv).map(|(k, _)| k)
}

/// Rotates each target offset directly, clamps the result to the cube per
/// axis and samples trilinearly.
pub fn rotate_kernel_interp_traced(
    w: &ReservoirKernel,
    r_inv: &Mat3,
) -> Result<(RotatedKernel, Vec<KernelSample>)> {
    check_rotation(r_inv)?;
    let r = (w.size / 2) as f64;
    let hi = (w.size - 1) as f64;
    let mut samples = Vec::with_capacity(w.taps());
    for v in lattice(w.size) {
        let o = Vec3::new(v[0] as f64 - r, v[1] as f64 - r, v[2] as f64 - r);
        let ro = r_inv * o;
        let rotated = [ro.x + r, ro.y + r, ro.z + r].map(snap);
        let source = rotated.map(|x| x.clamp(0.0, hi));
        samples.push(KernelSample {
            target: v,
            rotated,
            source,
            clamped: source != rotated,
        });
    }
    Ok((resample(w, *r_inv, &samples), samples))
}

pub fn rotate_kernel_interp(w: &ReservoirKernel, r_inv: &Mat3) -> Result<RotatedKernel> {
    rotate_kernel_interp_traced(w, r_inv).map(|(k, _)| k)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotationMethod {
    Discrete,
    Interpolation,
    /// Use the reservoir unchanged for every camera.
    None,
}

impl RotationMethod {
    pub fn rotate(self, w: &ReservoirKernel, r_inv: &Mat3) -> Result<RotatedKernel> {
        match self {
            RotationMethod::Discrete => rotate_kernel_discrete(w, r_inv),
            RotationMethod::Interpolation => rotate_kernel_interp(w, r_inv),
            RotationMethod::None => Ok(RotatedKernel {
                kernel: w.clone(),
                rotation: Mat3::identity(),
            }),
        }
    }
}

/// Plain 3D cross-correlation with zero padding and `w/2` halo, so the output
/// has the input grid.
pub fn conv3d(v: &SceneVolume, w: &ReservoirKernel) -> Result<SceneVolume> {
    if v.channels != w.c_in {
        return Err(Error::ShapeMismatch(format!(
            "volume has {} channels, kernel expects {}",
            v.channels, w.c_in
        )));
    }
    let [nx, ny, nz] = v.spec.dims;
    let n = v.voxels();
    let r = (w.size / 2) as isize;
    let ks = w.size;
    let mut out = vec![0.0; w.c_out * n];
    out.par_chunks_mut(n).enumerate().for_each(|(o, dst)| {
        for i in 0..w.c_in {
            let src = v.channel(i);
            let kern = w.slice(o, i);
            for a in 0..ks {
                let da = a as isize - r;
                let (x0, x1) = valid_range(nx, da);
                for b in 0..ks {
                    let db = b as isize - r;
                    let (y0, y1) = valid_range(ny, db);
                    for c in 0..ks {
                        let wt = kern[(a * ks + b) * ks + c];
                        if wt == 0.0 {
                            continue;
                        }
                        let dc = c as isize - r;
                        let (z0, z1) = valid_range(nz, dc);
                        for x in x0..x1 {
                            let sx = (x as isize + da) as usize;
                            for y in y0..y1 {
                                let sy = (y as isize + db) as usize;
                                let drow = (x * ny + y) * nz;
                                let srow = (sx * ny + sy) * nz;
                                let sz0 = (z0 as isize + dc) as usize;
                                let d = &mut dst[drow + z0..drow + z1];
                                let s = &src[srow + sz0..srow + sz0 + (z1 - z0)];
                                for (dv, sv) in d.iter_mut().zip(s) {
                                    *dv += wt * sv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(SceneVolume {
        spec: v.spec,
        channels: w.c_out,
        data: out,
    })
}

/// Output indices `x` with `x + d` inside `[0, n)`.
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(hi), hi)
}

/// Convolves a camera's feature volume with the reservoir rotated into that
/// camera's frame. `r_1_to_n` is the rotation taking world (first frame)
/// directions into camera `n` directions.
pub fn posed_conv3d(v: &SceneVolume, w: &ReservoirKernel, r_1_to_n: &Mat3) -> Result<SceneVolume> {
    let rotated = rotate_kernel_discrete(w, &r_1_to_n.transpose())?;
    conv3d(v, &rotated.kernel)
}

/// Running mean of posed volumes, accumulated in insertion order.
#[derive(Clone, Debug)]
pub struct PosedAverager {
    sum: Option<SceneVolume>,
    count: usize,
}

impl Default for PosedAverager {
    fn default() -> Self {
        Self::new()
    }
}

impl PosedAverager {
    pub fn new() -> Self {
        Self {
            sum: None,
            count: 0,
        }
    }

    pub fn add(&mut self, v: &SceneVolume) -> Result<()> {
        match &mut self.sum {
            None => self.sum = Some(v.clone()),
            Some(s) => {
                s.same_spec(v)?;
                if s.channels != v.channels {
                    return Err(Error::ShapeMismatch(format!(
                        "posed volumes have {} and {} channels",
                        s.channels, v.channels
                    )));
                }
                for (a, b) in s.data.iter_mut().zip(&v.data) {
                    *a += b;
                }
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(self) -> Result<SceneVolume> {
        let mut s = self.sum.ok_or(Error::Empty("posed volumes"))?;
        let inv = self.count as f64;
        for x in &mut s.data {
            *x /= inv;
        }
        Ok(s)
    }
}

pub fn average_posed_volumes(volumes: &[SceneVolume]) -> Result<SceneVolume> {
    let mut avg = PosedAverager::new();
    for v in volumes {
        avg.add(v)?;
    }
    avg.finish()
}

/// Rotated kernels keyed by the exact bits of the rotation, so each camera
/// orientation is resampled once.
pub struct KernelCache {
    reservoir: ReservoirKernel,
    method: RotationMethod,
    cache: Mutex<HashMap<[u64; 9], Arc<RotatedKernel>>>,
}

impl KernelCache {
    pub fn new(reservoir: ReservoirKernel, method: RotationMethod) -> Self {
        Self {
            reservoir,
            method,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn reservoir(&self) -> &ReservoirKernel {
        &self.reservoir
    }

    /// Kernel for a camera whose world-to-camera rotation is `r_1_to_n`.
    pub fn for_camera(&self, r_1_to_n: &Mat3) -> Result<Arc<RotatedKernel>> {
        let r_inv = r_1_to_n.transpose();
        let mut key = [0u64; 9];
        for (k, x) in key.iter_mut().zip(r_inv.iter()) {
            *k = x.to_bits();
        }
        if let Some(k) = self.cache.lock().unwrap().get(&key) {
            return Ok(k.clone());
        }
        let k = Arc::new(self.method.rotate(&self.reservoir, &r_inv)?);
        self.cache.lock().unwrap().insert(key, k.clone());
        Ok(k)
    }

    pub fn len(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The 24 proper rotations of the cube as exact signed permutation matrices.
pub fn cube_rotations() -> Vec<Mat3> {
    let perms = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut out = Vec::with_capacity(24);
    for p in perms {
        for signs in 0..8u32 {
            let mut m = Mat3::zeros();
            for (row, &col) in p.iter().enumerate() {
                m[(row, col)] = if signs >> row & 1 == 1 { -1.0 } else { 1.0 };
            }
            if m.determinant() > 0.0 {
                out.push(m);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_about_axis, VoxelGridSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_volume(c: usize, dims: [usize; 3], seed: u64) -> SceneVolume {
        let spec = VoxelGridSpec::new([0.0; 3], 0.1, dims).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * spec.num_voxels())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        SceneVolume::from_data(spec, c, data).unwrap()
    }

    /// Direct definition of zero-padded correlation.
    fn conv_naive(v: &SceneVolume, w: &ReservoirKernel) -> Vec<f64> {
        let [nx, ny, nz] = v.spec.dims;
        let r = (w.size / 2) as isize;
        let mut out = vec![0.0; w.c_out * v.voxels()];
        for o in 0..w.c_out {
            for x in 0..nx {
                for y in 0..ny {
                    for z in 0..nz {
                        let mut acc = 0.0;
                        for i in 0..w.c_in {
                            for a in 0..w.size {
                                for b in 0..w.size {
                                    for c in 0..w.size {
                                        let sx = x as isize + a as isize - r;
                                        let sy = y as isize + b as isize - r;
                                        let sz = z as isize + c as isize - r;
                                        if sx < 0
                                            || sy < 0
                                            || sz < 0
                                            || sx >= nx as isize
                                            || sy >= ny as isize
                                            || sz >= nz as isize
                                        {
                                            continue;
                                        }
                                        acc += w.at(o, i, [a, b, c])
                                            * v.at(i, sx as usize, sy as usize, sz as usize);
                                    }
                                }
                            }
                        }
                        out[o * v.voxels() + v.spec.linear_index(x, y, z)] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let v = random_volume(2, [5, 6, 7], 1);
        let w = ReservoirKernel::seeded(3, 2, 3, 2).unwrap();
        let fast = conv3d(&v, &w).unwrap();
        for (a, b) in fast.data.iter().zip(conv_naive(&v, &w)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn norm_examples() {
        assert_eq!(norm([1, 1, 1], 3).unwrap(), [0.0; 3]);
        let s = norm([2, 1, 1], 3).unwrap();
        assert_eq!(s, [1.0, 0.0, 0.0]);
        let s = norm([0, 0, 0], 3).unwrap();
        let e = -1.0 / 3f64.sqrt();
        for x in s {
            assert!((x - e).abs() < 1e-15);
        }
        assert!(norm([3, 0, 0], 3).is_err());
    }

    #[test]
    fn identity_rotation_reproduces_reservoir_bitwise() {
        for size in [3, 5, 7] {
            let w = ReservoirKernel::seeded(2, 2, size, 9).unwrap();
            assert_eq!(
                rotate_kernel_discrete(&w, &Mat3::identity())
                    .unwrap()
                    .kernel,
                w
            );
            assert_eq!(
                rotate_kernel_interp(&w, &Mat3::identity()).unwrap().kernel,
                w
            );
            let v = random_volume(2, [6, 5, 4], size as u64);
            assert_eq!(
                posed_conv3d(&v, &w, &Mat3::identity()).unwrap(),
                conv3d(&v, &w).unwrap()
            );
        }
    }

    #[test]
    fn quarter_turn_about_z_permutes_kernel() {
        let w = ReservoirKernel::seeded(1, 1, 3, 4).unwrap();
        let q = rotation_about_axis(&Vec3::z(), std::f64::consts::FRAC_PI_2);
        let rot = rotate_kernel_discrete(&w, &q).unwrap();
        // target offset o samples the reservoir at q * o: (x, y, z) -> (-y, x, z)
        for v in lattice(3) {
            let o = [v[0] as i32 - 1, v[1] as i32 - 1, v[2] as i32 - 1];
            let src = [
                (1 - o[1]) as usize,
                (o[0] + 1) as usize,
                (o[2] + 1) as usize,
            ];
            assert_eq!(rot.kernel.at(0, 0, v), w.at(0, 0, src));
        }
    }

    #[test]
    fn cube_rotation_group() {
        let rs = cube_rotations();
        assert_eq!(rs.len(), 24);
        for r in &rs {
            check_rotation(r).unwrap();
        }
        for (i, a) in rs.iter().enumerate() {
            for b in &rs[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    /// Rotating a volume by a cube rotation about its center.
    fn rotate_volume(v: &SceneVolume, q: &Mat3) -> SceneVolume {
        let n = v.spec.dims[0];
        let c = (n - 1) as f64 / 2.0;
        let mut out = SceneVolume::zeros(v.spec, v.channels);
        for ch in 0..v.channels {
            for idx in 0..v.voxels() {
                let [x, y, z] = v.spec.unravel(idx);
                let p = Vec3::new(x as f64 - c, y as f64 - c, z as f64 - c);
                let s = q.transpose() * p;
                let src = [s.x + c, s.y + c, s.z + c].map(|t| t.round() as usize);
                out.data[ch * v.voxels() + idx] = v.at(ch, src[0], src[1], src[2]);
            }
        }
        out
    }

    #[test]
    fn cube_rotations_commute_with_posed_conv() {
        let v = random_volume(2, [6, 6, 6], 3);
        let w = ReservoirKernel::seeded(2, 2, 3, 5).unwrap();
        let base = conv3d(&v, &w).unwrap();
        for q in cube_rotations() {
            let lhs = posed_conv3d(&rotate_volume(&v, &q), &w, &q).unwrap();
            let rhs = rotate_volume(&base, &q);
            for (a, b) in lhs.data.iter().zip(&rhs.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn interp_clamps_corners_under_oblique_rotation() {
        let w = ReservoirKernel::seeded(1, 1, 3, 0).unwrap();
        let r = rotation_about_axis(&Vec3::new(1.0, 2.0, 3.0).normalize(), 0.7);
        let (_, samples) = rotate_kernel_interp_traced(&w, &r).unwrap();
        assert!(samples.iter().any(|s| s.clamped));
        assert!(samples.iter().all(|s| s.in_cube(3)));
        let center = samples.iter().find(|s| s.target == [1, 1, 1]).unwrap();
        assert_eq!(center.source, [1.0; 3]);
    }

    #[test]
    fn center_tap_is_fixed_under_any_rotation() {
        let w = ReservoirKernel::seeded(1, 1, 5, 1).unwrap();
        let r = rotation_about_axis(&Vec3::new(0.3, -1.0, 0.2).normalize(), 1.1);
        for k in [
            rotate_kernel_discrete(&w, &r).unwrap(),
            rotate_kernel_interp(&w, &r).unwrap(),
        ] {
            assert_eq!(k.kernel.at(0, 0, [2, 2, 2]), w.at(0, 0, [2, 2, 2]));
        }
    }

    #[test]
    fn unrotated_discrete_equals_unclamped_interp() {
        // l * R (v / l) == R v, so for rotations that keep every sample inside
        // the cube the two methods coincide
        let w = ReservoirKernel::seeded(1, 1, 3, 6).unwrap();
        let q = rotation_about_axis(&Vec3::x(), std::f64::consts::PI);
        let a = rotate_kernel_discrete(&w, &q).unwrap();
        let b = rotate_kernel_interp(&w, &q).unwrap();
        assert_eq!(a.kernel, b.kernel);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ReservoirKernel::seeded(1, 1, 4, 0).is_err());
        assert!(ReservoirKernel::seeded(1, 1, 1, 0).is_err());
        let w = ReservoirKernel::seeded(1, 1, 3, 0).unwrap();
        let skew = Mat3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(rotate_kernel_discrete(&w, &skew).is_err());
        assert!(rotate_kernel_interp(&w, &skew).is_err());
        let v = random_volume(2, [3, 3, 3], 0);
        assert!(conv3d(&v, &w).is_err());
        assert!(average_posed_volumes(&[]).is_err());
    }

    #[test]
    fn kernel_file_round_trip_and_corruption() {
        let w = ReservoirKernel::seeded(2, 3, 5, 11).unwrap();
        let bytes = w.to_bytes();
        let p = Path::new("mem");
        assert_eq!(ReservoirKernel::from_bytes(&bytes, p).unwrap(), w);
        let mut b = bytes.clone();
        b[0] ^= 1;
        assert!(ReservoirKernel::from_bytes(&b, p).is_err());
        assert!(ReservoirKernel::from_bytes(&bytes[..bytes.len() - 4], p).is_err());
    }

    #[test]
    fn cache_reuses_kernels() {
        let cache = KernelCache::new(
            ReservoirKernel::seeded(1, 1, 3, 0).unwrap(),
            RotationMethod::Discrete,
        );
        let r = rotation_about_axis(&Vec3::y(), 0.4);
        let a = cache.for_camera(&r).unwrap();
        let b = cache.for_camera(&r).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn average_is_mean() {
        let a = random_volume(1, [2, 2, 2], 1);
        let b = random_volume(1, [2, 2, 2], 2);
        let m = average_posed_volumes(&[a.clone(), b.clone()]).unwrap();
        for ((x, y), z) in a.data.iter().zip(&b.data).zip(&m.data) {
            assert!(((x + y) / 2.0 - z).abs() < 1e-15);
        }
    }

    fn arb_rotation() -> impl Strategy<Value = Mat3> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -3.1f64..3.1).prop_filter_map(
            "axis",
            |(x, y, z, a)| {
                let ax = Vec3::new(x, y, z);
                (ax.norm() > 1e-3).then(|| rotation_about_axis(&ax.normalize(), a))
            },
        )
    }

    proptest! {
        #[test]
        fn discrete_preserves_radius(r in arb_rotation(), size in prop::sample::select(vec![3usize, 5, 7])) {
            let w = ReservoirKernel::seeded(1, 1, size, 0).unwrap();
            let (_, samples) = rotate_kernel_discrete_traced(&w, &r).unwrap();
            let c = (size / 2) as f64;
            for s in samples {
                let rt: f64 = s.target.iter().map(|&x| (x as f64 - c).powi(2)).sum::<f64>().sqrt();
                let rs: f64 = s.source.iter().map(|&x| (x - c).powi(2)).sum::<f64>().sqrt();
                prop_assert!((rt - rs).abs() < 1e-9);
            }
        }

        #[test]
        fn interp_samples_stay_in_cube(r in arb_rotation(), size in prop::sample::select(vec![3usize, 5])) {
            let w = ReservoirKernel::seeded(1, 1, size, 0).unwrap();
            let (_, samples) = rotate_kernel_interp_traced(&w, &r).unwrap();
            for s in samples {
                prop_assert!(s.in_cube(size));
                prop_assert_eq!(s.clamped, s.source != s.rotated);
            }
        }

        #[test]
        fn conv_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..100) {
            let v1 = random_volume(1, [4, 3, 5], seed);
            let v2 = random_volume(1, [4, 3, 5], seed + 1000);
            let w = ReservoirKernel::seeded(2, 1, 3, seed).unwrap();
            let mix = SceneVolume::from_data(v1.spec, 1, v1.data.iter().zip(&v2.data).map(|(x, y)| a * x + b * y).collect()).unwrap();
            let lhs = conv3d(&mix, &w).unwrap();
            let (c1, c2) = (conv3d(&v1, &w).unwrap(), conv3d(&v2, &w).unwrap());
            for ((l, x), y) in lhs.data.iter().zip(&c1.data).zip(&c2.data) {
                prop_assert!((l - (a * x + b * y)).abs() < 1e-10);
            }
        }
    }
}
