//! `sim3d`: command-line front end of the evaluation toolkit.
//!
//! Exit codes: 0 success, 2 validation failure, 3 I/O failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use sim3d::annotate::{build_ground_truth, lift_annotations, AnnotatedView, LiftOptions};
use sim3d::calibration::{assess_calibration, estimate_sensor_to_camera, CalibrationView};
use sim3d::dataset::{self, DatasetError, EvaluateOptions};
use sim3d::fusion::{fuse_instance, global_score};
use sim3d::geometry::{CameraIntrinsics, RigidTransform};
use sim3d::io::{self, PlyFormat, ScanSetup, SimvVolume};
use sim3d::meshops::{ransac_plane, remove_background, render_depth, BackgroundPreset, MeshScene, RansacParams};
use sim3d::metrics::{self, FprDomain};
use sim3d::synthbench::SynthPreset;
use sim3d::voxelgrid::{grid_from_mesh, GridSpec, DEFAULT_VOXEL_SIZE};

#[derive(Parser)]
#[command(name = "sim3d", version, about = "Multiview 3D anomaly detection evaluation toolkit")]
struct Cli {
    /// Cap on worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sensor-to-camera calibration from dot-pattern correspondences.
    #[command(subcommand)]
    Calib(CalibCommand),
    /// Background-plane removal and per-view depth rendering of a mesh.
    Preprocess(PreprocessArgs),
    /// Ground-truth construction from 2D annotations.
    #[command(subcommand)]
    Gt(GtCommand),
    /// Fuses per-view anomaly maps into an anomaly volume.
    Fuse(FuseArgs),
    /// Global score, and V-AUPRO against a ground-truth volume.
    Score(ScoreArgs),
    /// Fuses and scores every test instance of a dataset manifest.
    Evaluate(EvaluateArgs),
    /// Synthetic benchmark generation.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Reference detectors.
    #[command(subcommand)]
    Detect(DetectCommand),
}

#[derive(Subcommand)]
enum CalibCommand {
    /// Fits [R_pc|T_pc] on all but the last `--holdout` views and reports
    /// residuals on those.
    Estimate(CalibEstimateArgs),
    /// Residuals of an existing estimate on a set of views.
    Assess(CalibAssessArgs),
}

#[derive(Args)]
struct CalibEstimateArgs {
    /// Camera intrinsics JSON.
    #[arg(long)]
    intrinsics: PathBuf,
    /// Correspondence CSV (view_id,u,v,Xp,Yp,Zp,Xs,Ys,Zs).
    #[arg(long)]
    correspondences: PathBuf,
    /// Number of views (highest view ids) held out for assessment.
    #[arg(long, default_value_t = 5)]
    holdout: usize,
    /// Output transform JSON.
    #[arg(long)]
    out: PathBuf,
    /// Optional holdout report JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CalibAssessArgs {
    /// Camera intrinsics JSON.
    #[arg(long)]
    intrinsics: PathBuf,
    /// Correspondence CSV (view_id,u,v,Xp,Yp,Zp,Xs,Ys,Zs).
    #[arg(long)]
    correspondences: PathBuf,
    /// Transform JSON to assess.
    #[arg(long)]
    estimate: PathBuf,
    /// Report JSON (printed to stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Input mesh (PLY).
    #[arg(long)]
    mesh: PathBuf,
    /// Scan setup JSON: intrinsics, sensor-to-camera and per-view poses.
    #[arg(long)]
    setup: PathBuf,
    /// Output directory: mesh.ply, depth/view_XX.pfm, setup.json.
    #[arg(long)]
    out: PathBuf,
    /// Object class whose bundled (tau, alpha) preset to use.
    #[arg(long, conflicts_with_all = ["tau", "no_filter"])]
    class: Option<String>,
    /// RANSAC inlier threshold, mm.
    #[arg(long, requires = "alpha")]
    tau: Option<f64>,
    /// Extra cut above the fitted plane, mm.
    #[arg(long, requires = "tau")]
    alpha: Option<f64>,
    /// Skip background removal.
    #[arg(long)]
    no_filter: bool,
    /// RANSAC iterations.
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    /// Points per RANSAC sample.
    #[arg(long, default_value_t = 10)]
    sample_size: usize,
    /// RANSAC seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pad to square and downsample depths to this side length.
    #[arg(long)]
    downsample: Option<u32>,
}

#[derive(Subcommand)]
enum GtCommand {
    /// Transfers annotation-mask IDs to mesh vertices.
    Lift(GtLiftArgs),
    /// Voxelizes a labeled mesh into a ground-truth volume.
    Voxelize(GtVoxelizeArgs),
}

#[derive(Args)]
struct GtLiftArgs {
    /// Pre-processed mesh (PLY).
    #[arg(long)]
    mesh: PathBuf,
    /// Scan setup JSON.
    #[arg(long)]
    setup: PathBuf,
    /// Directory of 16-bit masks named view_XX.png; views without a mask are skipped.
    #[arg(long)]
    annotations: PathBuf,
    /// Labeled output mesh (PLY).
    #[arg(long)]
    out: PathBuf,
    /// Per-vertex vote conflicts (JSON).
    #[arg(long)]
    conflicts: Option<PathBuf>,
    /// Depth slack of the visibility test, mm.
    #[arg(long, default_value_t = DEFAULT_VOXEL_SIZE)]
    tolerance: f64,
}

#[derive(Args)]
struct GtVoxelizeArgs {
    /// Labeled mesh (PLY).
    #[arg(long)]
    mesh: PathBuf,
    /// Grid JSON; fitted to the mesh when omitted.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Voxel edge of a fitted grid, mm.
    #[arg(long, default_value_t = DEFAULT_VOXEL_SIZE)]
    voxel_size: f64,
    /// Empty voxels added on every side of a fitted grid.
    #[arg(long, default_value_t = 2)]
    padding: u32,
    /// Ground-truth volume (SIMV).
    #[arg(long)]
    out: PathBuf,
    /// Writes the grid used as JSON.
    #[arg(long)]
    grid_out: Option<PathBuf>,
}

#[derive(Args)]
struct FuseArgs {
    /// Scan setup JSON.
    #[arg(long)]
    setup: PathBuf,
    /// Directory of anomaly maps view_XX.pfm.
    #[arg(long)]
    maps: PathBuf,
    /// Directory of depth maps view_XX.pfm.
    #[arg(long)]
    depths: PathBuf,
    /// Grid JSON (must match the ground truth's).
    #[arg(long)]
    grid: PathBuf,
    /// Anomaly volume (SIMV).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Domain {
    /// Nominal voxels occupied by the ground-truth object.
    Gt,
    /// Nominal voxels that received a prediction.
    Touched,
}

impl From<Domain> for FprDomain {
    fn from(d: Domain) -> Self {
        match d {
            Domain::Gt => FprDomain::GroundTruthOccupied,
            Domain::Touched => FprDomain::PredictionTouched,
        }
    }
}

#[derive(Args)]
struct MetricArgs {
    /// FPR integration bound.
    #[arg(long, default_value_t = metrics::DEFAULT_BOUND)]
    bound: f64,
    /// Points of the reported PRO curve.
    #[arg(long, default_value_t = metrics::DEFAULT_SAMPLES)]
    samples: usize,
    /// Voxels that count towards the false-positive rate.
    #[arg(long, value_enum, default_value = "gt")]
    fpr_domain: Domain,
}

#[derive(Args)]
struct ScoreArgs {
    /// Anomaly volume (SIMV).
    #[arg(long)]
    volume: PathBuf,
    /// Ground-truth volume (SIMV).
    #[arg(long)]
    gt: Option<PathBuf>,
    #[command(flatten)]
    metric: MetricArgs,
    /// PRO curve CSV.
    #[arg(long, requires = "gt")]
    curve: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Setup {
    Real2real,
    Synth2real,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset manifest JSON.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of anomaly maps {id}/view_XX.pfm.
    #[arg(long)]
    maps: PathBuf,
    /// Report directory: report.json, curve.csv, curves/{id}.csv.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    metric: MetricArgs,
    /// Setup tag written into report.json.
    #[arg(long, value_enum)]
    setup: Option<Setup>,
    /// Also write every fused volume as {id}.simv here.
    #[arg(long)]
    volumes: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Renders a synthetic dataset with manifest.
    Make {
        /// Dataset directory; manifest.json is written at its root.
        #[arg(long)]
        out: PathBuf,
        /// Preset JSON (default: the built-in easy preset).
        #[arg(long)]
        preset: Option<PathBuf>,
        /// Writes the preset used as JSON.
        #[arg(long)]
        preset_out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainKind {
    Real,
    Synth,
}

#[derive(Subcommand)]
enum DetectCommand {
    /// |test − train| of 3×3-smoothed images, per view.
    Diff {
        /// Dataset manifest JSON.
        #[arg(long)]
        manifest: PathBuf,
        /// Which train instance serves as reference.
        #[arg(long, value_enum, default_value = "synth")]
        train: TrainKind,
        /// Output maps directory {id}/view_XX.pfm.
        #[arg(long)]
        out: PathBuf,
    },
}

fn view_file(dir: &Path, k: usize, ext: &str) -> PathBuf {
    dir.join(format!("view_{k:02}.{ext}"))
}

fn split_holdout(mut views: Vec<(usize, CalibrationView)>, holdout: usize) -> Result<(Vec<CalibrationView>, Vec<CalibrationView>)> {
    if holdout >= views.len() {
        bail!("holdout of {holdout} views leaves nothing to fit ({} views)", views.len());
    }
    let test = views.split_off(views.len() - holdout);
    Ok((views.into_iter().map(|v| v.1).collect(), test.into_iter().map(|v| v.1).collect()))
}

fn calib_estimate(a: CalibEstimateArgs) -> Result<()> {
    let intr: CameraIntrinsics = io::read_json(&a.intrinsics)?;
    let (fit, holdout) = split_holdout(io::read_correspondences(&a.correspondences)?, a.holdout)?;
    let estimate = estimate_sensor_to_camera(&fit, &intr)?;
    io::write_json(&a.out, &estimate)?;
    if !holdout.is_empty() {
        let report = assess_calibration(&estimate, &holdout, &intr)?;
        eprintln!("holdout rms {:.4} mm, max {:.4} mm over {} dots", report.rms, report.max, report.residuals.len());
        if let Some(p) = &a.report {
            io::write_json(p, &report)?;
        }
    }
    Ok(())
}

fn calib_assess(a: CalibAssessArgs) -> Result<()> {
    let intr: CameraIntrinsics = io::read_json(&a.intrinsics)?;
    let estimate: RigidTransform = io::read_json(&a.estimate)?;
    let views: Vec<CalibrationView> = io::read_correspondences(&a.correspondences)?.into_iter().map(|v| v.1).collect();
    let report = assess_calibration(&estimate, &views, &intr)?;
    eprintln!("rms {:.4} mm, max {:.4} mm over {} dots", report.rms, report.max, report.residuals.len());
    match &a.out {
        Some(p) => io::write_json(p, &report)?,
        None => print!("{}", String::from_utf8(io::encode_json(&report)?)?),
    }
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let setup: ScanSetup = io::read_json(&a.setup)?;
    let chain = setup.chain()?;
    let mut mesh = io::read_ply(&a.mesh)?;
    let params = match (&a.class, a.tau, a.alpha) {
        _ if a.no_filter => None,
        (Some(class), _, _) => BackgroundPreset::find(class).with_context(|| format!("unknown object class {class:?}"))?.params(),
        (None, Some(tau), Some(alpha)) => Some((tau, alpha)),
        _ => bail!("pass --class, --tau with --alpha, or --no-filter"),
    };
    if let Some((tau, alpha)) = params {
        let ransac = RansacParams { tau, iterations: a.iterations, sample_size: a.sample_size, seed: a.seed };
        let plane = ransac_plane(mesh.vertices(), &ransac)?;
        let removed = remove_background(&mesh, &plane, alpha);
        if removed.empty {
            bail!("background removal left no vertices");
        }
        eprintln!("removed {} background vertices", removed.removed_vertices);
        mesh = removed.mesh;
    }
    io::write_ply(&a.out.join("mesh.ply"), &mesh, PlyFormat::BinaryLittleEndian)?;
    let scene = MeshScene::new(&mesh)?;
    let intr = setup.intrinsics;
    let (out_intr, side) = match a.downsample {
        Some(side) => {
            let scale = side as f64 / intr.width.max(intr.height) as f64;
            (intr.scaled(scale, side, side)?, Some(side))
        }
        None => (intr, None),
    };
    (0..chain.view_count()).into_par_iter().try_for_each(|k| -> Result<()> {
        let depth = render_depth(&scene, &intr, &chain.mesh_to_camera(k)?);
        let depth = match side {
            Some(s) => depth.pad_and_downsample_depth(s),
            None => depth,
        };
        io::write_depth_pfm(&view_file(&a.out.join("depth"), k, "pfm"), &depth)?;
        Ok(())
    })?;
    io::write_json(&a.out.join("setup.json"), &ScanSetup { intrinsics: out_intr, ..setup })?;
    Ok(())
}

fn gt_lift(a: GtLiftArgs) -> Result<()> {
    let setup: ScanSetup = io::read_json(&a.setup)?;
    let chain = setup.chain()?;
    let mesh = io::read_ply(&a.mesh)?;
    let mut views = Vec::new();
    for k in 0..chain.view_count() {
        let p = view_file(&a.annotations, k, "png");
        if p.is_file() {
            views.push(AnnotatedView { view: k, mask: io::read_annotation_png(&p)? });
        }
    }
    if views.is_empty() {
        bail!("no view_XX.png masks in {}", a.annotations.display());
    }
    let result = lift_annotations(&mesh, &views, &chain, &setup.intrinsics, &LiftOptions { visibility_tolerance: a.tolerance })?;
    let labeled = result.mesh.labels().map_or(0, |l| l.iter().filter(|&&v| v != 0).count());
    eprintln!("{} of {} vertices labeled from {} views, {} conflicts", labeled, mesh.vertices().len(), views.len(), result.conflicts.len());
    io::write_ply(&a.out, &result.mesh, PlyFormat::BinaryLittleEndian)?;
    if let Some(p) = &a.conflicts {
        io::write_json(p, &result.conflicts)?;
    }
    Ok(())
}

fn gt_voxelize(a: GtVoxelizeArgs) -> Result<()> {
    let mesh = io::read_ply(&a.mesh)?;
    let spec: GridSpec = match &a.grid {
        Some(p) => io::read_json(p)?,
        None => grid_from_mesh(&mesh, a.voxel_size, a.padding)?,
    };
    let gt = build_ground_truth(&mesh, &spec)?;
    eprintln!("{} occupied voxels, {} defect blobs", gt.occupancy().count_ones(), gt.blob_count());
    io::write_simv(&a.out, &SimvVolume::Labels(gt))?;
    if let Some(p) = &a.grid_out {
        io::write_json(p, &spec)?;
    }
    Ok(())
}

fn fuse(a: FuseArgs) -> Result<()> {
    let setup: ScanSetup = io::read_json(&a.setup)?;
    let chain = setup.chain()?;
    let spec: GridSpec = io::read_json(&a.grid)?;
    let n = chain.view_count();
    let maps = (0..n).map(|k| io::read_pfm(&view_file(&a.maps, k, "pfm"))).collect::<Result<Vec<_>, _>>()?;
    let depths = (0..n).map(|k| io::read_depth_pfm(&view_file(&a.depths, k, "pfm"))).collect::<Result<Vec<_>, _>>()?;
    let (volume, dropped) = fuse_instance(&maps, &depths, &setup.intrinsics, &chain, &spec)?;
    let g = global_score(&volume);
    eprintln!("global score {} ({} voxels touched, {} pixels dropped)", g.score, volume.touched().count_ones(), dropped.iter().sum::<usize>());
    io::write_simv(&a.out, &SimvVolume::Scores(volume))?;
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let volume = io::read_anomaly_volume(&a.volume)?;
    let g = global_score(&volume);
    let mut out = serde_json::json!({ "score": g.score, "empty_volume": g.empty });
    if let Some(p) = &a.gt {
        let gt = io::read_ground_truth(p)?;
        let domain = a.metric.fpr_domain.into();
        let curve = metrics::pro_curve_exhaustive(&volume, &gt, domain)?;
        out["v_aupro"] = metrics::v_aupro(&curve, a.metric.bound)?.into();
        out["bound"] = a.metric.bound.into();
        out["blobs"] = gt.blob_count().into();
        if let Some(c) = &a.curve {
            io::write_bytes(c, metrics::pro_curve(&volume, &gt, a.metric.samples, domain)?.to_csv().as_bytes())?;
        }
    }
    print!("{}", String::from_utf8(io::encode_json(&out)?)?);
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let data = dataset::load_manifest(&a.manifest)?;
    let options = EvaluateOptions {
        bound: a.metric.bound,
        n_samples: a.metric.samples,
        fpr_domain: a.metric.fpr_domain.into(),
        setup: a.setup.map(|s| match s {
            Setup::Real2real => dataset::SetupTag::RealToReal,
            Setup::Synth2real => dataset::SetupTag::SynthToReal,
        }),
        volumes_dir: a.volumes,
    };
    let run = dataset::evaluate(&data, &a.maps, &options)?;
    dataset::write_report(&a.out, &run.report, run.setup)?;
    println!("I-AUROC {:.4}  V-AUPRO@{} {:.4}  ({} test instances)", run.report.i_auroc, options.bound, run.report.v_aupro, run.scores.len());
    Ok(())
}

fn synth_make(out: &Path, preset: Option<&Path>, preset_out: Option<&Path>) -> Result<()> {
    let preset = match preset {
        Some(p) => io::read_json(p)?,
        None => SynthPreset::easy(),
    };
    let manifest = dataset::write_synthetic_dataset(&preset, out)?;
    if let Some(p) = preset_out {
        io::write_json(p, &preset)?;
    }
    eprintln!("wrote {} instances to {}", manifest.instances.len(), out.display());
    Ok(())
}

fn detect_diff(manifest: &Path, train: TrainKind, out: &Path) -> Result<()> {
    let data = dataset::load_manifest(manifest)?;
    let kind = match train {
        TrainKind::Real => dataset::SetupKind::Real,
        TrainKind::Synth => dataset::SetupKind::Synth,
    };
    let n = dataset::run_reference_detector(&data, kind, out)?;
    eprintln!("wrote maps for {n} test instances");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Calib(CalibCommand::Estimate(a)) => calib_estimate(a),
        Command::Calib(CalibCommand::Assess(a)) => calib_assess(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Gt(GtCommand::Lift(a)) => gt_lift(a),
        Command::Gt(GtCommand::Voxelize(a)) => gt_voxelize(a),
        Command::Fuse(a) => fuse(a),
        Command::Score(a) => score(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Synth(SynthCommand::Make { out, preset, preset_out }) => synth_make(&out, preset.as_deref(), preset_out.as_deref()),
        Command::Detect(DetectCommand::Diff { manifest, train, out }) => detect_diff(&manifest, train, &out),
    }
}

/// 3 when anything in the chain is a file-system failure, 2 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    let io = err.chain().any(|e| e.is::<std::io::Error>() || e.downcast_ref::<DatasetError>().is_some_and(DatasetError::is_io));
    if io {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
