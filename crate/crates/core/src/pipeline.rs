//! Dataset ingestion, configuration and the two-stage reconstruction
//! pipeline.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{backproject_features, build_unified_volume, embed_depth_occupancy};
use crate::geometry::{read_intrinsics_file, read_pose_file, Camera, Intrinsics, VoxelGridSpec};
use crate::metrics::{
    eval_depth_pairs, eval_pointcloud_with, eval_tsdf_l1, format_key_values, format_table,
    DepthEvalReport, GeomEvalReport, PointDistance, RelativeDenominator, F_SCORE_THRESHOLD,
};
use crate::mvs::{
    estimate, extract_features, FeatureMap, MvsEstimate, SweepConfig, VarianceAggregator,
    FEATURE_STRIDE,
};
use crate::posedconv::{conv3d, KernelCache, PosedAverager, ReservoirKernel, RotationMethod};
use crate::raster::{DepthMap, GrayImage, OverlapMask};
use crate::synthetic::{analytic_tsdf, SceneDescription};
use crate::tsdf::{extract_mesh, render_depth, LossWeights, TriangleMesh, TsdfVolume};
use crate::volume::SceneVolume;

/// `root/{color,depth,pose}/%06d.*` plus `root/intrinsics.txt`.
#[derive(Clone, Debug)]
pub struct DatasetLayout {
    root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn color(&self, id: usize) -> PathBuf {
        self.root.join("color").join(format!("{id:06}.png"))
    }

    pub fn depth(&self, id: usize) -> PathBuf {
        self.root.join("depth").join(format!("{id:06}.png"))
    }

    pub fn pose(&self, id: usize) -> PathBuf {
        self.root.join("pose").join(format!("{id:06}.txt"))
    }

    pub fn intrinsics(&self) -> PathBuf {
        self.root.join("intrinsics.txt")
    }

    pub fn scene(&self) -> PathBuf {
        self.root.join("scene.json")
    }

    pub fn create_dirs(&self) -> Result<()> {
        for d in ["color", "depth", "pose"] {
            let p = self.root.join(d);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregatorConfig {
    pub kind: String,
    pub smoothing_radius: usize,
    pub depth_radius: usize,
    pub sharpness: f64,
    pub min_texture: f64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        let v = VarianceAggregator::default();
        Self {
            kind: "variance".into(),
            smoothing_radius: v.smoothing_radius,
            depth_radius: v.depth_radius,
            sharpness: v.sharpness,
            min_texture: v.min_texture,
        }
    }
}

impl AggregatorConfig {
    pub fn build(&self) -> Result<VarianceAggregator> {
        if self.kind != "variance" {
            return Err(Error::Config(format!("unknown aggregator {:?}", self.kind)));
        }
        if !(self.sharpness > 0.0) || !self.sharpness.is_finite() {
            return Err(Error::Config(format!(
                "aggregator sharpness must be positive, got {}",
                self.sharpness
            )));
        }
        if !(self.min_texture >= 0.0) || !self.min_texture.is_finite() {
            return Err(Error::Config(format!(
                "aggregator min_texture must be non-negative, got {}",
                self.min_texture
            )));
        }
        Ok(VarianceAggregator {
            smoothing_radius: self.smoothing_radius,
            depth_radius: self.depth_radius,
            sharpness: self.sharpness,
            min_texture: self.min_texture,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub f_score_threshold: f64,
    pub point_distance: PointDistance,
    pub relative_denominator: RelativeDenominator,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            f_score_threshold: F_SCORE_THRESHOLD,
            point_distance: PointDistance::L1,
            relative_denominator: RelativeDenominator::Predicted,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub sweep: SweepConfig,
    pub grid: VoxelGridSpec,
    pub mask_threshold: f64,
    pub truncation: f64,
    pub kernel_size: usize,
    pub channels: usize,
    pub kernel_seed: u64,
    pub kernel_path: Option<PathBuf>,
    pub rotation: RotationMethod,
    pub loss_weights: LossWeights,
    pub extractor: String,
    pub aggregator: AggregatorConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sweep: SweepConfig::default(),
            grid: VoxelGridSpec {
                origin: [-3.2, -1.28, 0.0],
                pitch: 0.04,
                dims: [160, 64, 160],
            },
            mask_threshold: crate::mvs::DEFAULT_MASK_THRESHOLD,
            truncation: 0.12,
            kernel_size: 3,
            channels: 32,
            kernel_seed: 0,
            kernel_path: None,
            rotation: RotationMethod::Discrete,
            loss_weights: LossWeights::default(),
            extractor: "sobel-pool".into(),
            aggregator: AggregatorConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.sweep.validate().map_err(cfg)?;
        self.grid.validate().map_err(cfg)?;
        self.aggregator.build()?;
        if self.extractor != "sobel-pool" {
            return Err(Error::Config(format!(
                "unknown feature extractor {:?}",
                self.extractor
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_threshold) {
            return Err(Error::Config(format!(
                "mask threshold must lie in [0, 1], got {}",
                self.mask_threshold
            )));
        }
        if !(self.truncation > 0.0) || !self.truncation.is_finite() {
            return Err(Error::Config(format!(
                "truncation must be positive, got {}",
                self.truncation
            )));
        }
        if self.kernel_size < 3 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd and >= 3, got {}",
                self.kernel_size
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        let w = &self.loss_weights;
        if [w.depth, w.overlap, w.tsdf]
            .iter()
            .any(|x| !(*x >= 0.0) || !x.is_finite())
        {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if !(self.eval.f_score_threshold > 0.0) {
            return Err(Error::Config("F-score threshold must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Keys present in `text` replace the corresponding values of `self`.
    pub fn overlay_toml(&self, text: &str) -> Result<Self> {
        let file: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        merge_tables(&mut base, file);
        let cfg: Self = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn overlay_file(&self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.overlay_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Replaces the grid with one at the current pitch covering `min..max`
    /// plus a margin of `margin` voxels.
    pub fn fit_grid(&mut self, min: [f64; 3], max: [f64; 3], margin: usize) -> Result<()> {
        let pad = self.grid.pitch * margin as f64;
        let lo = crate::geometry::Vec3::from(min).add_scalar(-pad);
        let hi = crate::geometry::Vec3::from(max).add_scalar(pad);
        self.grid = VoxelGridSpec::covering(&lo, &hi, self.grid.pitch)?;
        Ok(())
    }

    /// Reservoir kernel from `kernel_path`, else seeded.
    pub fn reservoir(&self) -> Result<ReservoirKernel> {
        let k = match &self.kernel_path {
            Some(p) => ReservoirKernel::load(p)?,
            None => ReservoirKernel::seeded(
                self.channels,
                self.channels,
                self.kernel_size,
                self.kernel_seed,
            )?,
        };
        if k.c_in != self.channels {
            return Err(Error::Config(format!(
                "kernel expects {} input channels, pipeline extracts {}",
                k.c_in, self.channels
            )));
        }
        Ok(k)
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub id: usize,
    pub color: PathBuf,
    pub depth: Option<PathBuf>,
    pub pose: PathBuf,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub frames: Vec<Frame>,
    pub intrinsics: Intrinsics,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let layout = DatasetLayout::new(root);
        let intrinsics = read_intrinsics_file(&layout.intrinsics())?;
        let color_dir = root.join("color");
        let entries = std::fs::read_dir(&color_dir).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Missing(color_dir.clone())
            } else {
                Error::io(&color_dir, e)
            }
        })?;
        let mut ids = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&color_dir, e))?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            let Some(stem) = name.strip_suffix(".png") else {
                continue;
            };
            if stem.len() == 6 && stem.bytes().all(|b| b.is_ascii_digit()) {
                ids.push(stem.parse::<usize>().expect("six digits"));
            }
        }
        ids.sort_unstable();
        if ids.is_empty() {
            return Err(Error::format("dataset", &color_dir, "no frames found"));
        }
        if let Some(w) = ids.windows(2).find(|w| w[1] != w[0] + 1) {
            return Err(Error::format(
                "dataset",
                &color_dir,
                format!("frame ids jump from {} to {}", w[0], w[1]),
            ));
        }
        let frames = ids
            .into_iter()
            .map(|id| {
                let pose = layout.pose(id);
                if !pose.exists() {
                    return Err(Error::Missing(pose));
                }
                let depth = Some(layout.depth(id)).filter(|p| p.exists());
                Ok(Frame {
                    id,
                    color: layout.color(id),
                    depth,
                    pose,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            root: root.to_path_buf(),
            frames,
            intrinsics,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn camera(&self, i: usize) -> Result<Camera> {
        Ok(Camera::new(
            self.intrinsics,
            read_pose_file(&self.frames[i].pose)?,
        ))
    }

    /// Camera at the resolution of the stage-one outputs.
    pub fn feature_camera(&self, i: usize) -> Result<Camera> {
        self.camera(i)?.downsampled(FEATURE_STRIDE)
    }

    pub fn image(&self, i: usize) -> Result<GrayImage> {
        let img = GrayImage::from_png(&self.frames[i].color)?;
        if img.width != self.intrinsics.width || img.height != self.intrinsics.height {
            return Err(Error::format(
                "image",
                &self.frames[i].color,
                format!(
                    "{}x{} does not match intrinsics {}x{}",
                    img.width, img.height, self.intrinsics.width, self.intrinsics.height
                ),
            ));
        }
        Ok(img)
    }

    pub fn gt_depth(&self, i: usize) -> Result<Option<DepthMap>> {
        self.frames[i]
            .depth
            .as_deref()
            .map(DepthMap::from_png_mm)
            .transpose()
    }

    pub fn has_gt_depth(&self) -> bool {
        self.frames.iter().all(|f| f.depth.is_some())
    }

    /// The generating scene, for synthetic datasets.
    pub fn scene_description(&self) -> Result<Option<SceneDescription>> {
        let p = DatasetLayout::new(&self.root).scene();
        if !p.exists() {
            return Ok(None);
        }
        SceneDescription::load(&p).map(Some)
    }
}

fn features_for(ds: &Dataset, i: usize, cfg: &PipelineConfig) -> Result<FeatureMap> {
    extract_features(&ds.image(i)?, cfg.channels)
}

#[derive(Clone, Debug)]
pub struct Stage1Frame {
    /// Position in `Dataset::frames`.
    pub index: usize,
    pub id: usize,
    pub estimate: MvsEstimate,
}

/// Stage one on every interior frame with its two temporal neighbors.
pub fn run_stage1(ds: &Dataset, cfg: &PipelineConfig) -> Result<Vec<Stage1Frame>> {
    cfg.validate()?;
    if ds.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "stage one needs at least 3 frames, dataset has {}",
            ds.len()
        )));
    }
    let aggregator = cfg.aggregator.build()?;
    let feats = (0..ds.len())
        .into_par_iter()
        .map(|i| features_for(ds, i, cfg))
        .collect::<Result<Vec<_>>>()?;
    let cams = (0..ds.len())
        .map(|i| ds.feature_camera(i))
        .collect::<Result<Vec<_>>>()?;
    (1..ds.len() - 1)
        .into_par_iter()
        .map(|n| {
            let est = estimate(
                &feats[n],
                [&feats[n - 1], &feats[n + 1]],
                [&cams[n], &cams[n - 1], &cams[n + 1]],
                &cfg.sweep,
                &aggregator,
                cfg.mask_threshold,
            )?;
            Ok(Stage1Frame {
                index: n,
                id: ds.frames[n].id,
                estimate: est,
            })
        })
        .collect()
}

fn stage1_paths(dir: &Path, id: usize) -> [PathBuf; 3] {
    [
        dir.join(format!("depth_{id:06}.vfr")),
        dir.join(format!("mask_{id:06}.vfr")),
        dir.join(format!("masked_{id:06}.vfr")),
    ]
}

pub fn write_stage1(dir: &Path, frames: &[Stage1Frame]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in frames {
        let [d, m, z] = stage1_paths(dir, f.id);
        f.estimate.depth.to_raster(&d)?;
        f.estimate.mask.to_raster(&m)?;
        f.estimate.masked.to_raster(&z)?;
    }
    Ok(())
}

/// Reads stage-one outputs for the interior frames of `ds`.
pub fn read_stage1(dir: &Path, ds: &Dataset) -> Result<Vec<Stage1Frame>> {
    if ds.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "stage one needs at least 3 frames, dataset has {}",
            ds.len()
        )));
    }
    (1..ds.len() - 1)
        .map(|n| {
            let id = ds.frames[n].id;
            let [d, m, z] = stage1_paths(dir, id);
            Ok(Stage1Frame {
                index: n,
                id,
                estimate: MvsEstimate {
                    depth: DepthMap::from_raster(&d)?,
                    mask: OverlapMask::from_raster(&m)?,
                    masked: DepthMap::from_raster(&z)?,
                },
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Stage2Output {
    pub unified: SceneVolume,
    pub tsdf: TsdfVolume,
    pub mesh: TriangleMesh,
}

/// Averaged posed-convolution features of the stage-one views, in frame order.
pub fn posed_feature_volume(
    ds: &Dataset,
    stage1: &[Stage1Frame],
    cfg: &PipelineConfig,
) -> Result<SceneVolume> {
    let cache = KernelCache::new(cfg.reservoir()?, cfg.rotation);
    let mut avg = PosedAverager::new();
    for f in stage1 {
        let feats = features_for(ds, f.index, cfg)?;
        let cam = ds.feature_camera(f.index)?;
        let bp = backproject_features(&feats, &cam, &cfg.grid)?;
        let kernel = cache.for_camera(cam.cam_from_world().rotation())?;
        avg.add(&conv3d(&bp.features, &kernel.kernel)?)?;
    }
    avg.finish()
}

pub fn run_stage2(
    ds: &Dataset,
    stage1: &[Stage1Frame],
    cfg: &PipelineConfig,
) -> Result<Stage2Output> {
    cfg.validate()?;
    if stage1.is_empty() {
        return Err(Error::Empty("stage-one outputs"));
    }
    let cams = stage1
        .iter()
        .map(|f| ds.feature_camera(f.index))
        .collect::<Result<Vec<_>>>()?;
    let depths: Vec<&DepthMap> = stage1.iter().map(|f| &f.estimate.masked).collect();
    let cam_refs: Vec<&Camera> = cams.iter().collect();
    let features = posed_feature_volume(ds, stage1, cfg)?;
    let occupancy = embed_depth_occupancy(&depths, &cam_refs, &cfg.grid)?;
    let unified = build_unified_volume(&features, &occupancy)?;
    let mut tsdf = TsdfVolume::new(cfg.grid, cfg.truncation)?;
    for (d, c) in depths.iter().zip(&cams) {
        tsdf.integrate(d, c)?;
    }
    let mesh = extract_mesh(&tsdf);
    if mesh.is_empty() {
        log::warn!("fused TSDF has no zero crossing; mesh is empty");
    }
    Ok(Stage2Output {
        unified,
        tsdf,
        mesh,
    })
}

pub const UNIFIED_FILE: &str = "unified.vol";
pub const TSDF_FILE: &str = "tsdf.vol";
pub const MESH_FILE: &str = "mesh.ply";
pub const REPORT_FILE: &str = "report.txt";

pub fn write_stage2(dir: &Path, out: &Stage2Output) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    out.unified.save(&dir.join(UNIFIED_FILE))?;
    out.tsdf.save(&dir.join(TSDF_FILE))?;
    out.mesh.write_ply(&dir.join(MESH_FILE))
}

pub fn read_stage2(dir: &Path, truncation: f64) -> Result<Stage2Output> {
    Ok(Stage2Output {
        unified: SceneVolume::load(&dir.join(UNIFIED_FILE))?,
        tsdf: TsdfVolume::load(&dir.join(TSDF_FILE), truncation)?,
        mesh: TriangleMesh::read_ply(&dir.join(MESH_FILE))?,
    })
}

/// Reference data at the stage-one resolution.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub views: Vec<(Camera, DepthMap)>,
    pub tsdf: Option<TsdfVolume>,
    pub points: Vec<[f64; 3]>,
}

/// Ground truth for the stage-one frames. The observed region is whatever
/// the ground-truth depths see. Synthetic datasets take TSDF values and
/// surface points from their exact scene inside that region; otherwise the
/// fused ground-truth depths stand in for the scene.
pub fn ground_truth(
    ds: &Dataset,
    stage1: &[Stage1Frame],
    cfg: &PipelineConfig,
) -> Result<GroundTruth> {
    let mut views = Vec::with_capacity(stage1.len());
    for f in stage1 {
        let d = ds
            .gt_depth(f.index)?
            .ok_or_else(|| Error::Missing(DatasetLayout::new(&ds.root).depth(f.id)))?;
        views.push((ds.feature_camera(f.index)?, d.downsample(FEATURE_STRIDE)?));
    }
    let mut fused = TsdfVolume::new(cfg.grid, cfg.truncation)?;
    for (c, d) in &views {
        fused.integrate(d, c)?;
    }
    let (tsdf, points) = match ds.scene_description()? {
        Some(desc) => {
            let scene = desc.scene()?;
            let exact = analytic_tsdf(&scene, &cfg.grid, cfg.truncation)?;
            for i in 0..fused.values.len() {
                if fused.observed(i) {
                    fused.values[i] = exact.values[i];
                }
            }
            let tol = 2.0 * cfg.grid.pitch;
            let pts = scene
                .surface_points(cfg.grid.pitch / 2.0)
                .into_iter()
                .filter(|p| views.iter().any(|(c, d)| sees(c, d, p, tol)))
                .collect();
            (fused, pts)
        }
        None => {
            let pts = extract_mesh(&fused).vertices;
            (fused, pts)
        }
    };
    Ok(GroundTruth {
        views,
        tsdf: Some(tsdf),
        points,
    })
}

fn sees(cam: &Camera, depth: &DepthMap, p: &[f64; 3], tol: f64) -> bool {
    let Ok(pr) = cam.project_world(&(*p).into()) else {
        return false;
    };
    cam.intrinsics
        .nearest_pixel(pr.u, pr.v)
        .and_then(|(u, v)| depth.get(u, v))
        .is_some_and(|z| (z - pr.z).abs() < tol)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Masked stage-one depths.
    pub before: Option<DepthEvalReport>,
    /// Depths rendered from the fused TSDF.
    pub after: DepthEvalReport,
    pub geometry: GeomEvalReport,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut rows = Vec::new();
        if let Some(b) = &self.before {
            rows.push(("before fusion", b.columns()));
        }
        rows.push(("after fusion", self.after.columns()));
        let mut out = format_table(&rows);
        out.push('\n');
        out.push_str(&format_table(&[("geometry", self.geometry.columns())]));
        out
    }

    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        if let Some(b) = &self.before {
            out.push_str(&format_key_values("before", &b.columns()));
            let _ = writeln!(out, "before.n={}", b.n);
        }
        out.push_str(&format_key_values("after", &self.after.columns()));
        let _ = writeln!(out, "after.n={}", self.after.n);
        out.push_str(&format_key_values("geometry", &self.geometry.columns()));
        out
    }
}

pub fn run_eval(
    stage1: Option<&[Stage1Frame]>,
    pred: &Stage2Output,
    gt: &GroundTruth,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let rendered = gt
        .views
        .par_iter()
        .map(|(c, _)| render_depth(&pred.tsdf, c))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(&DepthMap, &DepthMap)> = rendered
        .iter()
        .zip(gt.views.iter().map(|(_, d)| d))
        .collect();
    let after = eval_depth_pairs(&pairs, cfg.relative_denominator)?;
    let before = match stage1 {
        Some(s) => {
            if s.len() != gt.views.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} stage-one frames for {} ground-truth views",
                    s.len(),
                    gt.views.len()
                )));
            }
            let pairs: Vec<(&DepthMap, &DepthMap)> = s
                .iter()
                .zip(&gt.views)
                .map(|(f, (_, d))| (&f.estimate.masked, d))
                .collect();
            Some(eval_depth_pairs(&pairs, cfg.relative_denominator)?)
        }
        None => None,
    };
    let mut geometry = eval_pointcloud_with(
        &pred.mesh.vertices,
        &gt.points,
        cfg.f_score_threshold,
        cfg.point_distance,
    )?;
    if let Some(t) = &gt.tsdf {
        geometry.l1 = Some(eval_tsdf_l1(&pred.tsdf, t)?);
    }
    Ok(EvalReport {
        before,
        after,
        geometry,
    })
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub stage1: Vec<Stage1Frame>,
    pub stage2: Stage2Output,
    pub report: Option<EvalReport>,
}

/// Both stages plus evaluation when ground-truth depth is present; every
/// artifact is written under `out`.
pub fn run(ds: &Dataset, cfg: &PipelineConfig, out: &Path) -> Result<RunSummary> {
    let stage1 = run_stage1(ds, cfg)?;
    write_stage1(&out.join("stage1"), &stage1)?;
    let stage2 = run_stage2(ds, &stage1, cfg)?;
    write_stage2(out, &stage2)?;
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let report = if ds.has_gt_depth() {
        let gt = ground_truth(ds, &stage1, cfg)?;
        let r = run_eval(Some(&stage1), &stage2, &gt, &cfg.eval)?;
        let p = out.join(REPORT_FILE);
        std::fs::write(&p, r.to_key_values()).map_err(|e| Error::io(&p, e))?;
        Some(r)
    } else {
        None
    };
    Ok(RunSummary {
        stage1,
        stage2,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_matches_training_setup() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!((c.sweep.planes, c.sweep.z_min), (48, 0.5));
        assert_eq!(c.grid.dims, [160, 64, 160]);
        assert_eq!(c.grid.pitch, 0.04);
        assert_eq!(c.truncation, 0.12);
        assert_eq!(c.channels + 1, 33);
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial =
            PipelineConfig::from_toml("truncation = 0.2\n[sweep]\nplanes = 16\nz_min = 0.4\n")
                .unwrap();
        assert_eq!((partial.truncation, partial.sweep.planes), (0.2, 16));
        for bad in [
            "mask_threshold = 1.5",
            "kernel_size = 4",
            "unknown_key = 1",
            "[loss_weights]\ndepth = -1.0",
            "[aggregator]\nkind = \"hourglass\"",
        ] {
            let e = PipelineConfig::from_toml(bad).unwrap_err();
            assert!(e.is_usage(), "{bad}: {e}");
        }
    }

    #[test]
    fn file_keys_override_flag_values() {
        let mut flags = PipelineConfig::default();
        flags.channels = 8;
        flags.truncation = 0.3;
        flags.sweep.planes = 20;
        let c = flags
            .overlay_toml("truncation = 0.2\n[sweep]\nz_min = 0.4\n")
            .unwrap();
        assert_eq!(c.truncation, 0.2);
        assert_eq!(c.channels, 8);
        assert_eq!((c.sweep.planes, c.sweep.z_min), (20, 0.4));
        assert!(flags.overlay_toml("channels = 0").unwrap_err().is_usage());
    }

    #[test]
    fn fitted_grid_covers_the_box() {
        let mut c = PipelineConfig::default();
        c.fit_grid([-1.0, 0.0, 0.5], [1.0, 0.3, 2.0], 2).unwrap();
        let (lo, hi) = c.grid.bounds();
        assert!(lo.x <= -1.08 + 1e-12 && lo.z <= 0.42 + 1e-12);
        assert!(hi.x >= 1.08 - 1e-12 && hi.y >= 0.38 - 1e-12 && hi.z >= 2.08 - 1e-12);
    }

    #[test]
    fn layout_paths() {
        let l = DatasetLayout::new(Path::new("/d"));
        assert_eq!(l.color(7), Path::new("/d/color/000007.png"));
        assert_eq!(l.depth(12), Path::new("/d/depth/000012.png"));
        assert_eq!(l.pose(0), Path::new("/d/pose/000000.txt"));
    }
}
