use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vfusion::geometry::{rotation_about_axis, Vec3};
use vfusion::metrics::{
    eval_depth_pairs, eval_pointcloud_with, eval_tsdf_l1, format_key_values, format_table,
};
use vfusion::metrics::{PointDistance, RelativeDenominator};
use vfusion::pipeline::{self, Dataset, PipelineConfig};
use vfusion::posedconv::{
    rotate_kernel_discrete_traced, rotate_kernel_interp_traced, ReservoirKernel, RotationMethod,
};
use vfusion::raster::DepthMap;
use vfusion::synthetic::{self, SceneDescription};
use vfusion::tsdf::{extract_mesh, render_depth, TriangleMesh, TsdfVolume};

#[derive(Parser)]
#[command(
    name = "vfusion",
    version,
    about = "Multi-view depth estimation and volumetric fusion"
)]
struct Cli {
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Synth(SynthArgs),
    /// Stage one: per-frame depth and overlap mask.
    Sweep(SweepArgs),
    /// Stage two: unified volume, TSDF and mesh from stage-one outputs.
    Fuse(FuseArgs),
    /// Extract a mesh from a TSDF volume.
    Mesh(MeshArgs),
    /// Ray-cast a depth map from a TSDF volume.
    RenderDepth(RenderArgs),
    /// Depth metrics for predicted/ground-truth depth map pairs.
    EvalDepth(EvalDepthArgs),
    /// Reconstruction metrics for meshes and TSDF volumes.
    #[command(name = "eval-3d")]
    Eval3d(Eval3dArgs),
    /// Dump the discrete and interpolated rotation of a kernel.
    RotateKernel(RotateKernelArgs),
    /// Both stages plus evaluation.
    Run(RunArgs),
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML config; keys present in the file override the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    planes: Option<usize>,
    #[arg(long)]
    z_min: Option<f64>,
    /// Grid origin as x,y,z.
    #[arg(long, value_parser = parse_triple::<f64>)]
    grid_origin: Option<[f64; 3]>,
    #[arg(long)]
    pitch: Option<f64>,
    /// Grid dimensions as nx,ny,nz.
    #[arg(long, value_parser = parse_triple::<usize>)]
    dims: Option<[usize; 3]>,
    #[arg(long)]
    mask_threshold: Option<f64>,
    #[arg(long)]
    truncation: Option<f64>,
    #[arg(long)]
    kernel_size: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    kernel_seed: Option<u64>,
    /// Reservoir kernel file; otherwise a seeded random kernel.
    #[arg(long)]
    kernel: Option<PathBuf>,
    #[arg(long, value_enum)]
    rotation: Option<RotationArg>,
    /// Loss weights as depth,overlap,tsdf.
    #[arg(long, value_parser = parse_triple::<f64>)]
    loss_weights: Option<[f64; 3]>,
    #[arg(long)]
    smoothing_radius: Option<usize>,
    #[arg(long)]
    depth_radius: Option<usize>,
    #[arg(long)]
    sharpness: Option<f64>,
    /// Minimum reference feature variance for a pixel to count as textured.
    #[arg(long)]
    min_texture: Option<f64>,
    #[arg(long)]
    f_score_threshold: Option<f64>,
    #[arg(long, value_enum)]
    point_distance: Option<DistanceArg>,
    #[arg(long, value_enum)]
    relative_denominator: Option<DenominatorArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RotationArg {
    Discrete,
    Interpolation,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistanceArg {
    L1,
    L2,
}

#[derive(Clone, Copy, ValueEnum)]
enum DenominatorArg {
    Predicted,
    GroundTruth,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Room,
    Sphere,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "room", conflicts_with = "scene")]
    preset: Preset,
    /// JSON scene description instead of a preset.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Override the number of views.
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory written by `sweep`.
    #[arg(long)]
    stage1: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct MeshArgs {
    #[arg(long)]
    tsdf: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    tsdf: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    frame: usize,
    /// Output depth: `.png` for 16-bit millimetres, anything else for the raw raster format.
    #[arg(long)]
    out: PathBuf,
    /// Render at the dataset resolution instead of the stage-one resolution.
    #[arg(long)]
    full_res: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvalDepthArgs {
    /// Predicted depth maps (`.png` millimetres or raster).
    #[arg(long, num_args = 1.., required = true)]
    pred: Vec<PathBuf>,
    /// Ground-truth depth maps, paired with `--pred` in order. Larger maps are
    /// downsampled to the prediction's resolution.
    #[arg(long, num_args = 1.., required = true)]
    gt: Vec<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct Eval3dArgs {
    /// Predicted mesh; its vertices are the evaluated points.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, requires = "gt_tsdf")]
    pred_tsdf: Option<PathBuf>,
    #[arg(long, requires = "pred_tsdf")]
    gt_tsdf: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct RotateKernelArgs {
    #[arg(long, default_value_t = 5)]
    size: usize,
    /// Rotation axis as x,y,z.
    #[arg(long, value_parser = parse_triple::<f64>, default_value = "0,0,1")]
    axis: [f64; 3],
    #[arg(long, default_value_t = 45.0)]
    angle_deg: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print one line per kernel voxel.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

/// Bad invocation rather than bad data.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> std::result::Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got {s:?}"));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|_| format!("cannot parse {p:?}"))?);
    }
    out.try_into().map_err(|_| unreachable!())
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let c = self.apply(PipelineConfig::default());
        match &self.config {
            Some(path) => Ok(c.overlay_file(path)?),
            None => {
                c.validate()?;
                Ok(c)
            }
        }
    }

    /// Like `resolve`, but without `--config` the dataset's own `config.toml`
    /// (written by `synth`) is the base and flags are applied over it.
    fn resolve_for(&self, data: &Path) -> Result<PipelineConfig> {
        let own = data.join("config.toml");
        if self.config.is_some() || !own.is_file() {
            return self.resolve();
        }
        let c = self.apply(PipelineConfig::load(&own)?);
        c.validate()?;
        Ok(c)
    }

    fn apply(&self, mut c: PipelineConfig) -> PipelineConfig {
        if let Some(v) = self.planes {
            c.sweep.planes = v;
        }
        if let Some(v) = self.z_min {
            c.sweep.z_min = v;
        }
        if let Some(v) = self.grid_origin {
            c.grid.origin = v;
        }
        if let Some(v) = self.pitch {
            c.grid.pitch = v;
        }
        if let Some(v) = self.dims {
            c.grid.dims = v;
        }
        if let Some(v) = self.mask_threshold {
            c.mask_threshold = v;
        }
        if let Some(v) = self.truncation {
            c.truncation = v;
        }
        if let Some(v) = self.kernel_size {
            c.kernel_size = v;
        }
        if let Some(v) = self.channels {
            c.channels = v;
        }
        if let Some(v) = self.kernel_seed {
            c.kernel_seed = v;
        }
        if let Some(v) = &self.kernel {
            c.kernel_path = Some(v.clone());
        }
        if let Some(v) = self.rotation {
            c.rotation = match v {
                RotationArg::Discrete => RotationMethod::Discrete,
                RotationArg::Interpolation => RotationMethod::Interpolation,
                RotationArg::None => RotationMethod::None,
            };
        }
        if let Some([d, o, t]) = self.loss_weights {
            c.loss_weights.depth = d;
            c.loss_weights.overlap = o;
            c.loss_weights.tsdf = t;
        }
        if let Some(v) = self.smoothing_radius {
            c.aggregator.smoothing_radius = v;
        }
        if let Some(v) = self.depth_radius {
            c.aggregator.depth_radius = v;
        }
        if let Some(v) = self.sharpness {
            c.aggregator.sharpness = v;
        }
        if let Some(v) = self.min_texture {
            c.aggregator.min_texture = v;
        }
        if let Some(v) = self.f_score_threshold {
            c.eval.f_score_threshold = v;
        }
        if let Some(v) = self.point_distance {
            c.eval.point_distance = match v {
                DistanceArg::L1 => PointDistance::L1,
                DistanceArg::L2 => PointDistance::L2,
            };
        }
        if let Some(v) = self.relative_denominator {
            c.eval.relative_denominator = match v {
                DenominatorArg::Predicted => RelativeDenominator::Predicted,
                DenominatorArg::GroundTruth => RelativeDenominator::GroundTruth,
            };
        }
        c
    }
}

fn read_depth(path: &Path) -> Result<DepthMap> {
    let d = if path.extension().is_some_and(|e| e == "png") {
        DepthMap::from_png_mm(path)?
    } else {
        DepthMap::from_raster(path)?
    };
    Ok(d)
}

fn write_depth(path: &Path, d: &DepthMap) -> Result<()> {
    if path.extension().is_some_and(|e| e == "png") {
        d.to_png_mm(path)?;
    } else {
        d.to_raster(path)?;
    }
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut desc = match &a.scene {
        Some(p) => SceneDescription::load(p)?,
        None => match a.preset {
            Preset::Room => synthetic::two_plane_room(),
            Preset::Sphere => synthetic::sphere_orbit(36),
        },
    };
    if let Some(n) = a.views {
        desc.trajectory.n = n;
    }
    let cams = synthetic::write_dataset(&desc, &a.out)?;
    let mut cfg = a.cfg.resolve()?;
    let scene = desc.scene()?;
    cfg.fit_grid(scene.bounds.min.into(), scene.bounds.max.into(), 3)?;
    let path = a.out.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} views to {}", cams.len(), a.out.display());
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let cfg = a.cfg.resolve_for(&a.data)?;
    let ds = Dataset::open(&a.data)?;
    let frames = pipeline::run_stage1(&ds, &cfg)?;
    pipeline::write_stage1(&a.out, &frames)?;
    for f in &frames {
        println!(
            "frame {:06}: {} of {} pixels kept",
            f.id,
            f.estimate.masked.valid_count(),
            f.estimate.masked.len()
        );
    }
    Ok(())
}

fn fuse(a: &FuseArgs) -> Result<()> {
    let cfg = a.cfg.resolve_for(&a.data)?;
    let ds = Dataset::open(&a.data)?;
    let frames = pipeline::read_stage1(&a.stage1, &ds)?;
    let out = pipeline::run_stage2(&ds, &frames, &cfg)?;
    pipeline::write_stage2(&a.out, &out)?;
    println!(
        "fused {} views: {} observed voxels, {} vertices, {} faces",
        frames.len(),
        out.tsdf.observed_count(),
        out.mesh.vertices.len(),
        out.mesh.faces.len()
    );
    Ok(())
}

fn mesh(a: &MeshArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let vol = TsdfVolume::load(&a.tsdf, cfg.truncation)?;
    let m = extract_mesh(&vol);
    if m.is_empty() {
        log::warn!("TSDF has no zero crossing; mesh is empty");
    }
    m.write_ply(&a.out)?;
    println!("{} vertices, {} faces", m.vertices.len(), m.faces.len());
    Ok(())
}

fn render(a: &RenderArgs) -> Result<()> {
    let cfg = a.cfg.resolve_for(&a.data)?;
    let ds = Dataset::open(&a.data)?;
    let i = ds
        .frames
        .iter()
        .position(|f| f.id == a.frame)
        .ok_or_else(|| usage(format!("frame {} is not in the dataset", a.frame)))?;
    let cam = if a.full_res {
        ds.camera(i)?
    } else {
        ds.feature_camera(i)?
    };
    let vol = TsdfVolume::load(&a.tsdf, cfg.truncation)?;
    let d = render_depth(&vol, &cam)?;
    write_depth(&a.out, &d)?;
    println!("{} of {} pixels hit the surface", d.valid_count(), d.len());
    Ok(())
}

fn eval_depth(a: &EvalDepthArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    if a.pred.len() != a.gt.len() {
        return Err(usage(format!(
            "{} predictions for {} ground-truth maps",
            a.pred.len(),
            a.gt.len()
        )));
    }
    let mut maps = Vec::with_capacity(a.pred.len());
    for (p, g) in a.pred.iter().zip(&a.gt) {
        let pred = read_depth(p)?;
        let mut gt = read_depth(g)?;
        if gt.width != pred.width && pred.width > 0 && gt.width % pred.width == 0 {
            gt = gt.downsample(gt.width / pred.width)?;
        }
        maps.push((pred, gt));
    }
    let pairs: Vec<(&DepthMap, &DepthMap)> = maps.iter().map(|(p, g)| (p, g)).collect();
    let r = eval_depth_pairs(&pairs, cfg.eval.relative_denominator)?;
    print!("{}", format_table(&[("depth", r.columns())]));
    print!("{}", format_key_values("depth", &r.columns()));
    println!("depth.n={}", r.n);
    Ok(())
}

fn eval_3d(a: &Eval3dArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let pred = TriangleMesh::read_ply(&a.pred)?;
    let gt = TriangleMesh::read_ply(&a.gt)?;
    let mut r = eval_pointcloud_with(
        &pred.vertices,
        &gt.vertices,
        cfg.eval.f_score_threshold,
        cfg.eval.point_distance,
    )?;
    if let (Some(p), Some(g)) = (&a.pred_tsdf, &a.gt_tsdf) {
        let p = TsdfVolume::load(p, cfg.truncation)?;
        let g = TsdfVolume::load(g, cfg.truncation)?;
        r.l1 = Some(eval_tsdf_l1(&p, &g)?);
    }
    print!("{}", format_table(&[("geometry", r.columns())]));
    print!("{}", format_key_values("geometry", &r.columns()));
    Ok(())
}

fn rotate_kernel(a: &RotateKernelArgs) -> Result<()> {
    let axis = Vec3::from(a.axis);
    if !(axis.norm() > 0.0) {
        return Err(usage("rotation axis must be non-zero"));
    }
    let k = ReservoirKernel::seeded(1, 1, a.size, a.seed).map_err(|e| usage(e.to_string()))?;
    let r_inv = rotation_about_axis(&axis.normalize(), a.angle_deg.to_radians()).transpose();
    let (disc, ds) = rotate_kernel_discrete_traced(&k, &r_inv)?;
    let (interp, is) = rotate_kernel_interp_traced(&k, &r_inv)?;
    let c = (a.size / 2) as f64;
    let radius =
        |p: [f64; 3]| ((p[0] - c).powi(2) + (p[1] - c).powi(2) + (p[2] - c).powi(2)).sqrt();
    let mut max_radius_err = 0.0f64;
    let mut outside = 0;
    let mut clamped = 0;
    let mut max_diff = 0.0f64;
    if a.verbose {
        println!("target     discrete source            interp source              clamped");
    }
    for (i, (d, s)) in ds.iter().zip(&is).enumerate() {
        let t = d.target.map(|x| x as f64);
        max_radius_err = max_radius_err.max((radius(d.source) - radius(t)).abs());
        outside += usize::from(!d.in_cube(a.size));
        clamped += usize::from(s.clamped);
        max_diff = max_diff.max((disc.kernel.weights[i] - interp.kernel.weights[i]).abs());
        if a.verbose {
            println!(
                "{:?}  ({:>6.3},{:>6.3},{:>6.3})  ({:>6.3},{:>6.3},{:>6.3})  {}",
                d.target,
                d.source[0],
                d.source[1],
                d.source[2],
                s.source[0],
                s.source[1],
                s.source[2],
                s.clamped
            );
        }
    }
    println!("taps={}", ds.len());
    println!("discrete.max_radius_error={max_radius_err:.3e}");
    println!("discrete.outside_cube={outside}");
    println!("interp.clamped={clamped}");
    println!("max_weight_difference={max_diff:.6}");
    Ok(())
}

fn run(a: &RunArgs) -> Result<()> {
    let cfg = a.cfg.resolve_for(&a.data)?;
    let ds = Dataset::open(&a.data)?;
    let s = pipeline::run(&ds, &cfg, &a.out)?;
    println!(
        "{} stage-one frames, {} vertices, {} faces",
        s.stage1.len(),
        s.stage2.mesh.vertices.len(),
        s.stage2.mesh.faces.len()
    );
    match &s.report {
        Some(r) => print!("{}", r.to_table()),
        None => println!("no ground-truth depth; evaluation skipped"),
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match e.downcast_ref::<vfusion::Error>() {
        Some(v) if v.is_usage() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let res = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Sweep(a) => sweep(a),
        Command::Fuse(a) => fuse(a),
        Command::Mesh(a) => mesh(a),
        Command::RenderDepth(a) => render(a),
        Command::EvalDepth(a) => eval_depth(a),
        Command::Eval3d(a) => eval_3d(a),
        Command::RotateKernel(a) => rotate_kernel(a),
        Command::Run(a) => run(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
