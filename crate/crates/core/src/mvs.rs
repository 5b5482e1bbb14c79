//! Stage one: plane-sweep cost volumes over a reference frame and its two
//! neighbors, soft-argmin depth regression, the depth-max-pooled overlap
//! mask, and the losses that supervise both.
//!
//! Volume layout is `K × D × H × W`, row-major, with plane index `d` stored
//! 0-based; plane `d` (0-based) sits at depth `z_min · D / (d + 1)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_homography, plane_homography, Camera, Mat3};
use crate::raster::{check_shape, GrayImage, OverlapMask};

pub use crate::raster::{DepthMap, OverlapLabel};

/// Downsampling factor between input images and feature maps.
pub const FEATURE_STRIDE: usize = 4;

/// Relative depth agreement required by [`geometric_overlap_gt`].
pub const GT_DEPTH_AGREEMENT: f64 = 0.05;

pub const DEFAULT_MASK_THRESHOLD: f64 = 0.5;

/// `C × H × W` feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {channels}x{height}x{width} feature map",
                data.len()
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("feature map"));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, v: usize, u: usize) -> f64 {
        self.data[(c * self.height + v) * self.width + u]
    }

    /// Bilinear weights for a continuous position, or `None` outside
    /// `[0, W-1] × [0, H-1]`.
    pub(crate) fn bilinear_taps(&self, u: f64, v: f64) -> Option<[(usize, f64); 4]> {
        bilinear_taps(self.width, self.height, u, v)
    }

    /// Samples every channel at `(u, v)` into `out`, returning false (and
    /// zero-filling) outside the map.
    pub fn sample_into(&self, u: f64, v: f64, out: &mut [f64]) -> bool {
        let n = self.height * self.width;
        match self.bilinear_taps(u, v) {
            Some(taps) => {
                for (c, o) in out.iter_mut().enumerate() {
                    let base = c * n;
                    *o = taps.iter().map(|(i, w)| w * self.data[base + i]).sum();
                }
                true
            }
            None => {
                out.iter_mut().for_each(|o| *o = 0.0);
                false
            }
        }
    }
}

pub(crate) fn bilinear_taps(
    width: usize,
    height: usize,
    u: f64,
    v: f64,
) -> Option<[(usize, f64); 4]> {
    if !(u >= 0.0 && v >= 0.0 && u <= (width - 1) as f64 && v <= (height - 1) as f64) {
        return None;
    }
    let x0 = (u.floor() as usize).min(width.saturating_sub(2));
    let y0 = (v.floor() as usize).min(height.saturating_sub(2));
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    Some([
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ])
}

/// Deterministic stand-in for a learned extractor: 4× average-pooled
/// intensity and its Sobel gradients, tiled cyclically to `channels`.
pub fn extract_features(img: &GrayImage, channels: usize) -> Result<FeatureMap> {
    let s = FEATURE_STRIDE;
    if channels == 0 {
        return Err(Error::InvalidArgument(
            "feature channels must be >= 1".into(),
        ));
    }
    if img.width % s != 0 || img.height % s != 0 || img.width < s || img.height < s {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} is not divisible by the feature stride {s}",
            img.width, img.height
        )));
    }
    let (w, h) = (img.width / s, img.height / s);
    let mut pooled = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            let mut acc = 0.0;
            for dv in 0..s {
                let row = (v * s + dv) * img.width + u * s;
                acc += img.data[row..row + s].iter().sum::<f64>();
            }
            pooled[v * w + u] = acc / (s * s) as f64;
        }
    }
    let px = |u: isize, v: isize| -> f64 {
        let u = u.clamp(0, w as isize - 1) as usize;
        let v = v.clamp(0, h as isize - 1) as usize;
        pooled[v * w + u]
    };
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for v in 0..h as isize {
        for u in 0..w as isize {
            let i = v as usize * w + u as usize;
            gx[i] = (px(u + 1, v - 1) + 2.0 * px(u + 1, v) + px(u + 1, v + 1)
                - px(u - 1, v - 1)
                - 2.0 * px(u - 1, v)
                - px(u - 1, v + 1))
                / 8.0;
            gy[i] = (px(u - 1, v + 1) + 2.0 * px(u, v + 1) + px(u + 1, v + 1)
                - px(u - 1, v - 1)
                - 2.0 * px(u, v - 1)
                - px(u + 1, v - 1))
                / 8.0;
        }
    }
    let base = [&pooled, &gx, &gy];
    let mut data = Vec::with_capacity(channels * w * h);
    for c in 0..channels {
        data.extend_from_slice(base[c % 3]);
    }
    FeatureMap::new(channels, h, w, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Number of fronto-parallel planes `D`.
    pub planes: usize,
    /// Nearest plane depth in meters.
    pub z_min: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            planes: 48,
            z_min: 0.5,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.planes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 planes, got {}",
                self.planes
            )));
        }
        if !(self.z_min > 0.0) || !self.z_min.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "z_min must be positive, got {}",
                self.z_min
            )));
        }
        Ok(())
    }

    /// Depth of 1-based plane `d`.
    pub fn depth(&self, d: usize) -> f64 {
        self.z_min * self.planes as f64 / d as f64
    }

    /// Gap between the two planes bracketing `z` (the sweep's local resolution).
    pub fn spacing_at(&self, z: f64) -> f64 {
        let d = (self.z_min * self.planes as f64 / z)
            .floor()
            .clamp(1.0, (self.planes - 1) as f64) as usize;
        self.depth(d) - self.depth(d + 1)
    }
}

/// Plane depths `z_min · D / d` for `d = 1..=D`, so the list is decreasing.
pub fn plane_depths(cfg: &SweepConfig) -> Vec<f64> {
    (1..=cfg.planes).map(|d| cfg.depth(d)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeKind {
    /// Reference and warped neighbor features stacked, `K = 3C`.
    Initial,
    /// Per-plane depth logits, `K = 1`.
    AggregatedDepth,
    /// Overlap / non-overlap logits, `K = 2`.
    Overlap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    pub kind: VolumeKind,
    pub channels: usize,
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    /// For initial volumes: `3 × D × H × W` sample validity per view
    /// (reference, neighbor 0, neighbor 1).
    pub view_weights: Option<Vec<f64>>,
}

impl CostVolume {
    pub fn new(
        kind: VolumeKind,
        channels: usize,
        planes: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let expect = match kind {
            VolumeKind::AggregatedDepth => Some(1),
            VolumeKind::Overlap => Some(2),
            VolumeKind::Initial => None,
        };
        if let Some(k) = expect {
            if channels != k {
                return Err(Error::ShapeMismatch(format!(
                    "{kind:?} volume needs {k} channels, got {channels}"
                )));
            }
        }
        if data.len() != channels * planes * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {channels}x{planes}x{height}x{width} volume",
                data.len()
            )));
        }
        Ok(Self {
            kind,
            channels,
            planes,
            height,
            width,
            data,
            view_weights: None,
        })
    }

    pub fn index(&self, c: usize, d: usize, v: usize, u: usize) -> usize {
        ((c * self.planes + d) * self.height + v) * self.width + u
    }

    pub fn at(&self, c: usize, d: usize, v: usize, u: usize) -> f64 {
        self.data[self.index(c, d, v, u)]
    }

    fn expect_kind(&self, kind: VolumeKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::InvalidArgument(format!(
                "expected a {kind:?} volume, got {:?}",
                self.kind
            )));
        }
        Ok(())
    }
}

/// One depth plane of an initial volume: `3C × H × W` features and
/// `3 × H × W` view validity.
#[derive(Clone, Debug)]
pub struct PlaneSlice {
    pub features: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepShape {
    /// Channels per view `C`.
    pub channels: usize,
    pub planes: usize,
    pub height: usize,
    pub width: usize,
}

/// Anything that can hand out initial-volume planes one at a time.
pub trait PlaneSource: Sync {
    fn shape(&self) -> SweepShape;
    /// 0-based plane.
    fn plane(&self, d: usize) -> PlaneSlice;
}

impl PlaneSource for CostVolume {
    fn shape(&self) -> SweepShape {
        SweepShape {
            channels: self.channels / 3,
            planes: self.planes,
            height: self.height,
            width: self.width,
        }
    }

    fn plane(&self, d: usize) -> PlaneSlice {
        let n = self.height * self.width;
        let mut features = Vec::with_capacity(self.channels * n);
        for c in 0..self.channels {
            let start = self.index(c, d, 0, 0);
            features.extend_from_slice(&self.data[start..start + n]);
        }
        let weights = match &self.view_weights {
            Some(w) => (0..3)
                .flat_map(|view| {
                    let start = (view * self.planes + d) * n;
                    w[start..start + n].iter().copied()
                })
                .collect(),
            None => vec![1.0; 3 * n],
        };
        PlaneSlice { features, weights }
    }
}

/// Lazily warped plane sweep: neighbor features resampled into the reference
/// view through the homography of each plane.
pub struct PlaneSweep<'a> {
    reference: &'a FeatureMap,
    neighbors: [&'a FeatureMap; 2],
    /// Per 0-based plane, reference→neighbor homographies.
    homographies: Vec<[Mat3; 2]>,
}

impl<'a> PlaneSweep<'a> {
    /// `cams[0]` is the reference camera. Camera intrinsics must describe the
    /// feature-map resolution.
    pub fn new(
        reference: &'a FeatureMap,
        neighbors: [&'a FeatureMap; 2],
        cams: [&Camera; 3],
        cfg: &SweepConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        for (i, f) in std::iter::once(reference).chain(neighbors).enumerate() {
            if (f.channels, f.height, f.width)
                != (reference.channels, reference.height, reference.width)
            {
                return Err(Error::ShapeMismatch(format!(
                    "feature map {i} is {}x{}x{}, reference is {}x{}x{}",
                    f.channels,
                    f.height,
                    f.width,
                    reference.channels,
                    reference.height,
                    reference.width
                )));
            }
            let k = &cams[i].intrinsics;
            check_shape(
                (k.width, k.height),
                (f.width, f.height),
                "camera vs feature map",
            )?;
        }
        let mut homographies = Vec::with_capacity(cfg.planes);
        let rel = [cams[0].relative_to(cams[1]), cams[0].relative_to(cams[2])];
        for z in plane_depths(cfg) {
            homographies.push([
                plane_homography(&cams[0].intrinsics, &cams[1].intrinsics, &rel[0], z)?,
                plane_homography(&cams[0].intrinsics, &cams[2].intrinsics, &rel[1], z)?,
            ]);
        }
        Ok(Self {
            reference,
            neighbors,
            homographies,
        })
    }
}

impl PlaneSource for PlaneSweep<'_> {
    fn shape(&self) -> SweepShape {
        SweepShape {
            channels: self.reference.channels,
            planes: self.homographies.len(),
            height: self.reference.height,
            width: self.reference.width,
        }
    }

    fn plane(&self, d: usize) -> PlaneSlice {
        let (c, h, w) = (
            self.reference.channels,
            self.reference.height,
            self.reference.width,
        );
        let n = h * w;
        let mut features = vec![0.0; 3 * c * n];
        let mut weights = vec![0.0; 3 * n];
        features[..c * n].copy_from_slice(&self.reference.data);
        weights[..n].iter_mut().for_each(|x| *x = 1.0);
        let mut sample = vec![0.0; c];
        for (view, nb) in self.neighbors.iter().enumerate() {
            let hmat = &self.homographies[d][view];
            let group = (view + 1) * c * n;
            for v in 0..h {
                for u in 0..w {
                    let p = v * w + u;
                    let ok = match apply_homography(hmat, u as f64, v as f64) {
                        Some((su, sv)) => nb.sample_into(su, sv, &mut sample),
                        None => false,
                    };
                    if ok {
                        weights[(view + 1) * n + p] = 1.0;
                        for (ch, s) in sample.iter().enumerate() {
                            features[group + ch * n + p] = *s;
                        }
                    }
                }
            }
        }
        PlaneSlice { features, weights }
    }
}

/// Materializes the full `3C × D × H × W` initial volume (with its view
/// validity channel). Prefer streaming a [`PlaneSweep`] for large inputs.
pub fn build_initial_volume(
    reference: &FeatureMap,
    neighbors: [&FeatureMap; 2],
    cams: [&Camera; 3],
    cfg: &SweepConfig,
) -> Result<CostVolume> {
    let sweep = PlaneSweep::new(reference, neighbors, cams, cfg)?;
    let shape = sweep.shape();
    let n = shape.height * shape.width;
    let planes: Vec<PlaneSlice> = (0..shape.planes)
        .into_par_iter()
        .map(|d| sweep.plane(d))
        .collect();
    let k = 3 * shape.channels;
    let mut data = vec![0.0; k * shape.planes * n];
    let mut weights = vec![0.0; 3 * shape.planes * n];
    for (d, slice) in planes.iter().enumerate() {
        for ch in 0..k {
            let dst = (ch * shape.planes + d) * n;
            data[dst..dst + n].copy_from_slice(&slice.features[ch * n..(ch + 1) * n]);
        }
        for view in 0..3 {
            let dst = (view * shape.planes + d) * n;
            weights[dst..dst + n].copy_from_slice(&slice.weights[view * n..(view + 1) * n]);
        }
    }
    let mut vol = CostVolume::new(
        VolumeKind::Initial,
        k,
        shape.planes,
        shape.height,
        shape.width,
        data,
    )?;
    vol.view_weights = Some(weights);
    Ok(vol)
}

/// Reduces an initial volume to depth logits and overlap logits.
pub trait Aggregator: Sync {
    fn aggregate(&self, source: &dyn PlaneSource) -> Result<(CostVolume, CostVolume)>;
}

/// Photo-consistency aggregator: per plane, the unbiased variance of the
/// three views' features (views whose warp left the image are excluded), box-smoothed over
/// a window of `2·smoothing_radius + 1` pixels square and `2·depth_radius + 1`
/// planes deep, and turned into logits `-sharpness · var / mean_d(var)`.
///
/// Planes seen by fewer than two views carry no evidence and get the pixel's
/// worst observed variance. Overlap logits are the coverage indicator (both
/// neighbor samples in bounds) and its complement. Reference pixels whose
/// feature variance over the smoothing window is below `min_texture` are
/// textureless and marked non-overlapping on every plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceAggregator {
    pub smoothing_radius: usize,
    pub depth_radius: usize,
    pub sharpness: f64,
    pub min_texture: f64,
}

impl Default for VarianceAggregator {
    fn default() -> Self {
        Self {
            smoothing_radius: 2,
            depth_radius: 0,
            sharpness: 64.0,
            min_texture: 1e-4,
        }
    }
}

/// Marker for planes without cross-view evidence.
const NO_EVIDENCE: f64 = -1.0;

impl VarianceAggregator {
    fn plane_variance(slice: &PlaneSlice, shape: &SweepShape) -> (Vec<f64>, Vec<f64>) {
        let n = shape.height * shape.width;
        let c = shape.channels;
        let mut var = vec![NO_EVIDENCE; n];
        let mut coverage = vec![0.0; n];
        for p in 0..n {
            let w = [
                slice.weights[p],
                slice.weights[n + p],
                slice.weights[2 * n + p],
            ];
            let count: f64 = w.iter().sum();
            coverage[p] = if w[1] > 0.0 && w[2] > 0.0 { 1.0 } else { 0.0 };
            if count < 2.0 {
                continue;
            }
            let mut acc = 0.0;
            for ch in 0..c {
                let f = [
                    slice.features[ch * n + p],
                    slice.features[(c + ch) * n + p],
                    slice.features[(2 * c + ch) * n + p],
                ];
                let mean = (w[0] * f[0] + w[1] * f[1] + w[2] * f[2]) / count;
                acc += w
                    .iter()
                    .zip(&f)
                    .map(|(wi, fi)| wi * (fi - mean) * (fi - mean))
                    .sum::<f64>()
                    / (count - 1.0);
            }
            var[p] = acc / c as f64;
        }
        (var, coverage)
    }

    /// Per-pixel flag: the reference features vary over the smoothing window.
    fn texture_mask(&self, source: &dyn PlaneSource) -> Vec<bool> {
        let shape = source.shape();
        let (h, w, c) = (shape.height, shape.width, shape.channels);
        let n = h * w;
        if self.min_texture <= 0.0 || shape.planes == 0 {
            return vec![true; n];
        }
        let slice = source.plane(0);
        let r = [0, self.smoothing_radius, self.smoothing_radius];
        let mut spread = vec![0.0; n];
        for ch in 0..c {
            let f = &slice.features[ch * n..(ch + 1) * n];
            let sq: Vec<f64> = f.iter().map(|x| x * x).collect();
            let m = box_smooth(f, [1, h, w], r);
            let m2 = box_smooth(&sq, [1, h, w], r);
            for p in 0..n {
                spread[p] += (m2[p] - m[p] * m[p]).max(0.0) / c as f64;
            }
        }
        spread.iter().map(|&v| v >= self.min_texture).collect()
    }
}

impl Aggregator for VarianceAggregator {
    fn aggregate(&self, source: &dyn PlaneSource) -> Result<(CostVolume, CostVolume)> {
        let shape = source.shape();
        let (dn, h, w) = (shape.planes, shape.height, shape.width);
        let n = h * w;
        let per_plane: Vec<(Vec<f64>, Vec<f64>)> = (0..dn)
            .into_par_iter()
            .map(|d| Self::plane_variance(&source.plane(d), &shape))
            .collect();

        let mut var = vec![0.0; dn * n];
        for p in 0..n {
            let worst = per_plane.iter().map(|(v, _)| v[p]).fold(0.0f64, f64::max);
            for d in 0..dn {
                let x = per_plane[d].0[p];
                var[d * n + p] = if x == NO_EVIDENCE { worst } else { x };
            }
        }
        let var = box_smooth(
            &var,
            [dn, h, w],
            [
                self.depth_radius,
                self.smoothing_radius,
                self.smoothing_radius,
            ],
        );

        let mut logits = vec![0.0; dn * n];
        let textured = self.texture_mask(source);
        for p in 0..n {
            let mean = (0..dn).map(|d| var[d * n + p]).sum::<f64>() / dn as f64;
            let scale = self.sharpness / (mean + 1e-12);
            for d in 0..dn {
                logits[d * n + p] = -scale * var[d * n + p];
            }
        }
        let mut overlap = vec![0.0; 2 * dn * n];
        for (d, (_, cov)) in per_plane.iter().enumerate() {
            for p in 0..n {
                let c = if textured[p] { cov[p] } else { 0.0 };
                overlap[d * n + p] = c;
                overlap[(dn + d) * n + p] = 1.0 - c;
            }
        }
        Ok((
            CostVolume::new(VolumeKind::AggregatedDepth, 1, dn, h, w, logits)?,
            CostVolume::new(VolumeKind::Overlap, 2, dn, h, w, overlap)?,
        ))
    }
}

/// Mean over the box of per-axis `radii` clipped to the grid. The clipped
/// window is a product of intervals, so the mean factorizes per axis.
pub(crate) fn box_smooth(data: &[f64], dims: [usize; 3], radii: [usize; 3]) -> Vec<f64> {
    let mut cur = data.to_vec();
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let radius = radii[axis];
        if radius == 0 {
            continue;
        }
        let len = dims[axis];
        let stride = strides[axis];
        let mut next = vec![0.0; cur.len()];
        for (idx, out) in next.iter_mut().enumerate() {
            let pos = (idx / stride) % len;
            let lo = pos.saturating_sub(radius);
            let hi = (pos + radius).min(len - 1);
            let base = idx - pos * stride;
            let mut acc = 0.0;
            for q in lo..=hi {
                acc += cur[base + q * stride];
            }
            *out = acc / (hi - lo + 1) as f64;
        }
        cur = next;
    }
    cur
}

pub fn aggregate(
    initial: &CostVolume,
    aggregator: &dyn Aggregator,
) -> Result<(CostVolume, CostVolume)> {
    initial.expect_kind(VolumeKind::Initial)?;
    if initial.channels % 3 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "initial volume has {} channels",
            initial.channels
        )));
    }
    aggregator.aggregate(initial)
}

/// Softmax along the depth axis at every pixel, `D × H × W`.
fn depth_softmax(vz: &CostVolume) -> Result<Vec<f64>> {
    let (dn, n) = (vz.planes, vz.height * vz.width);
    if vz.data.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("depth logits"));
    }
    let mut prob = vec![0.0; dn * n];
    for p in 0..n {
        let max = (0..dn)
            .map(|d| vz.data[d * n + p])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for d in 0..dn {
            let e = (vz.data[d * n + p] - max).exp();
            prob[d * n + p] = e;
            sum += e;
        }
        for d in 0..dn {
            prob[d * n + p] /= sum;
        }
    }
    Ok(prob)
}

fn check_depth_volume(vz: &CostVolume, cfg: &SweepConfig) -> Result<()> {
    vz.expect_kind(VolumeKind::AggregatedDepth)?;
    cfg.validate()?;
    if vz.planes != cfg.planes {
        return Err(Error::ShapeMismatch(format!(
            "volume has {} planes, config {}",
            vz.planes, cfg.planes
        )));
    }
    Ok(())
}

/// Soft-argmin: `z = Σ_d (z_min · D / d) · softmax_d(a)`.
pub fn regress_depth(vz: &CostVolume, cfg: &SweepConfig) -> Result<DepthMap> {
    check_depth_volume(vz, cfg)?;
    let prob = depth_softmax(vz)?;
    let depths = plane_depths(cfg);
    let n = vz.height * vz.width;
    let values = (0..n)
        .map(|p| {
            depths
                .iter()
                .enumerate()
                .map(|(d, z)| z * prob[d * n + p])
                .sum()
        })
        .collect();
    DepthMap::from_values(vz.width, vz.height, values)
}

/// Chain rule through [`regress_depth`]: `∂z/∂a_d = p_d (z_d − z)`.
pub fn regress_depth_backward(
    vz: &CostVolume,
    cfg: &SweepConfig,
    grad_depth: &[f64],
) -> Result<Vec<f64>> {
    check_depth_volume(vz, cfg)?;
    let n = vz.height * vz.width;
    if grad_depth.len() != n {
        return Err(Error::ShapeMismatch("depth gradient".into()));
    }
    let prob = depth_softmax(vz)?;
    let depths = plane_depths(cfg);
    let mut grad = vec![0.0; vz.data.len()];
    for p in 0..n {
        let z: f64 = depths
            .iter()
            .enumerate()
            .map(|(d, zd)| zd * prob[d * n + p])
            .sum();
        for (d, zd) in depths.iter().enumerate() {
            grad[d * n + p] = grad_depth[p] * prob[d * n + p] * (zd - z);
        }
    }
    Ok(grad)
}

fn overlap_probability(vm: &CostVolume) -> Result<Vec<f64>> {
    vm.expect_kind(VolumeKind::Overlap)?;
    let dn_n = vm.planes * vm.height * vm.width;
    Ok((0..dn_n)
        .map(|i| 1.0 / (1.0 + (vm.data[dn_n + i] - vm.data[i]).exp()))
        .collect())
}

/// Two-class softmax per voxel, then max-pool of the overlap probability
/// along the depth axis.
pub fn overlap_mask(vm: &CostVolume) -> Result<OverlapMask> {
    let prob = overlap_probability(vm)?;
    let n = vm.height * vm.width;
    let data = (0..n)
        .map(|p| {
            (0..vm.planes)
                .map(|d| prob[d * n + p])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Ok(OverlapMask {
        width: vm.width,
        height: vm.height,
        data,
        known: vec![true; n],
    })
}

/// Chain rule through [`overlap_mask`]; the max-pool routes each pixel's
/// gradient to its first maximal plane.
pub fn overlap_mask_backward(vm: &CostVolume, grad_mask: &[f64]) -> Result<Vec<f64>> {
    let prob = overlap_probability(vm)?;
    let n = vm.height * vm.width;
    if grad_mask.len() != n {
        return Err(Error::ShapeMismatch("mask gradient".into()));
    }
    let dn_n = vm.planes * n;
    let mut grad = vec![0.0; 2 * dn_n];
    for p in 0..n {
        let mut best = 0;
        for d in 1..vm.planes {
            if prob[d * n + p] > prob[best * n + p] {
                best = d;
            }
        }
        let q = prob[best * n + p];
        let g = grad_mask[p] * q * (1.0 - q);
        grad[best * n + p] = g;
        grad[dn_n + best * n + p] = -g;
    }
    Ok(grad)
}

/// Invalidates pixels whose overlap probability is below `threshold`.
pub fn mask_depth(depth: &DepthMap, mask: &OverlapMask, threshold: f64) -> Result<DepthMap> {
    mask.same_shape(depth.width, depth.height)?;
    let mut out = depth.clone();
    for i in 0..out.len() {
        if !(mask.known[i] && mask.data[i] >= threshold) {
            out.data[i] = 0.0;
            out.valid[i] = false;
        }
    }
    Ok(out)
}

/// Ground-truth overlap from ground-truth depths.
///
/// A reference pixel is `Overlap` when its 3D point lands inside both
/// neighbor images and agrees with each neighbor's depth within
/// [`GT_DEPTH_AGREEMENT`]; `NonOverlap` when it leaves either image, falls
/// behind either camera or is occluded; `Unknown` when a needed depth is
/// missing. Camera intrinsics must describe the depth-map resolution.
pub fn geometric_overlap_gt(depths: [&DepthMap; 3], cams: [&Camera; 3]) -> Result<OverlapMask> {
    geometric_overlap_gt_with_tolerance(depths, cams, GT_DEPTH_AGREEMENT)
}

pub fn geometric_overlap_gt_with_tolerance(
    depths: [&DepthMap; 3],
    cams: [&Camera; 3],
    tolerance: f64,
) -> Result<OverlapMask> {
    for i in 0..3 {
        let k = &cams[i].intrinsics;
        check_shape(
            (k.width, k.height),
            (depths[i].width, depths[i].height),
            "camera vs depth map",
        )?;
    }
    let (w, h) = (depths[0].width, depths[0].height);
    let mut labels = vec![OverlapLabel::Unknown; w * h];
    for v in 0..h {
        for u in 0..w {
            let Some(z) = depths[0].get(u, v) else {
                continue;
            };
            let world = cams[0].backproject_world(u as f64, v as f64, z)?;
            let mut label = OverlapLabel::Overlap;
            for nb in 1..3 {
                let local = cams[nb].cam_from_world().apply(&world);
                let k = &cams[nb].intrinsics;
                let proj = match crate::geometry::project(&local, k) {
                    Ok(p) if k.contains(p.u, p.v) => p,
                    _ => {
                        label = OverlapLabel::NonOverlap;
                        break;
                    }
                };
                let (pu, pv) = k
                    .nearest_pixel(proj.u, proj.v)
                    .expect("contained pixel rounds inside");
                match depths[nb].get(pu, pv) {
                    None => label = OverlapLabel::Unknown,
                    Some(znb) => {
                        if (znb - proj.z).abs() > tolerance * proj.z {
                            label = OverlapLabel::NonOverlap;
                            break;
                        }
                    }
                }
            }
            labels[v * w + u] = label;
        }
    }
    Ok(OverlapMask::from_labels(w, h, &labels))
}

/// `Σ |M̃ − M|` over pixels with a known ground-truth label.
pub fn overlap_loss(pred: &OverlapMask, gt: &OverlapMask) -> Result<f64> {
    pred.same_shape(gt.width, gt.height)?;
    Ok((0..pred.data.len())
        .filter(|&i| gt.known[i])
        .map(|i| (pred.data[i] - gt.data[i]).abs())
        .sum())
}

/// Subgradient of [`overlap_loss`] with respect to the predicted mask.
pub fn overlap_loss_grad(pred: &OverlapMask, gt: &OverlapMask) -> Result<Vec<f64>> {
    pred.same_shape(gt.width, gt.height)?;
    Ok((0..pred.data.len())
        .map(|i| {
            if gt.known[i] {
                (pred.data[i] - gt.data[i]).signum()
            } else {
                0.0
            }
        })
        .collect())
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Pixels where the depth loss is defined, with their mask weight.
fn depth_loss_terms<'a>(
    pred: &'a DepthMap,
    gt: &'a DepthMap,
    gt_mask: &'a OverlapMask,
) -> Result<impl Iterator<Item = (usize, f64)> + 'a> {
    pred.same_shape(gt)?;
    gt_mask.same_shape(gt.width, gt.height)?;
    Ok((0..pred.len())
        .filter(move |&i| pred.valid[i] && gt.valid[i] && gt_mask.known[i])
        .map(move |i| (i, gt_mask.data[i])))
}

/// `Σ M · smoothL1(z − z̃)`.
pub fn depth_loss(pred: &DepthMap, gt: &DepthMap, gt_mask: &OverlapMask) -> Result<f64> {
    Ok(depth_loss_terms(pred, gt, gt_mask)?
        .map(|(i, m)| m * smooth_l1(gt.data[i] - pred.data[i]))
        .sum())
}

/// Gradient of [`depth_loss`] with respect to the predicted depths.
pub fn depth_loss_grad(pred: &DepthMap, gt: &DepthMap, gt_mask: &OverlapMask) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; pred.len()];
    for (i, m) in depth_loss_terms(pred, gt, gt_mask)? {
        grad[i] = -m * smooth_l1_grad(gt.data[i] - pred.data[i]);
    }
    Ok(grad)
}

/// Depth loss as a function of the aggregated logits, with its gradient.
pub fn depth_loss_from_logits(
    vz: &CostVolume,
    cfg: &SweepConfig,
    gt: &DepthMap,
    gt_mask: &OverlapMask,
) -> Result<(f64, Vec<f64>)> {
    let pred = regress_depth(vz, cfg)?;
    let loss = depth_loss(&pred, gt, gt_mask)?;
    let g = depth_loss_grad(&pred, gt, gt_mask)?;
    Ok((loss, regress_depth_backward(vz, cfg, &g)?))
}

/// Overlap loss as a function of the overlap logits, with its gradient.
pub fn overlap_loss_from_logits(vm: &CostVolume, gt: &OverlapMask) -> Result<(f64, Vec<f64>)> {
    let pred = overlap_mask(vm)?;
    let loss = overlap_loss(&pred, gt)?;
    let g = overlap_loss_grad(&pred, gt)?;
    Ok((loss, overlap_mask_backward(vm, &g)?))
}

/// Stage-one output for one reference frame.
#[derive(Clone, Debug)]
pub struct MvsEstimate {
    pub depth: DepthMap,
    pub mask: OverlapMask,
    pub masked: DepthMap,
}

/// Sweep, aggregate, regress and mask for one reference frame.
pub fn estimate(
    reference: &FeatureMap,
    neighbors: [&FeatureMap; 2],
    cams: [&Camera; 3],
    cfg: &SweepConfig,
    aggregator: &dyn Aggregator,
    mask_threshold: f64,
) -> Result<MvsEstimate> {
    let sweep = PlaneSweep::new(reference, neighbors, cams, cfg)?;
    let (vz, vm) = aggregator.aggregate(&sweep)?;
    let depth = regress_depth(&vz, cfg)?;
    let mask = overlap_mask(&vm)?;
    let masked = mask_depth(&depth, &mask, mask_threshold)?;
    Ok(MvsEstimate {
        depth,
        mask,
        masked,
    })
}
