//! Dataset manifests, end-to-end evaluation, and the synthetic dataset
//! generator.
//!
//! A manifest lists the instances of one object type. Paths are relative to
//! the manifest's directory. Anomaly maps for evaluation live in a separate
//! directory as `{maps}/{instance id}/view_{k:02}.pfm`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotate::render_labels;
use crate::fusion::{fuse_instance, global_score};
use crate::geometry::{CameraIntrinsics, FrameChain, RigidTransform};
use crate::io::{self, IoError, PlyFormat, SimvVolume};
use crate::meshops::{MeshScene, TriangleMesh};
use crate::metrics::{self, Condition, FprDomain, InstanceReport, InstanceScore, MetricsError, MetricsReport, ProCurve};
use crate::raster::{AnomalyMap2D, DepthMap, GrayImage};
use crate::synthbench::{self, make_mesh, simulate_scan, SynthPreset};
use crate::voxelgrid::{grid_from_mesh, voxelize_labeled_mesh, AnomalyVolume, GridSpec, GroundTruthVolume};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: invalid manifest: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("{} referenced files are missing: {}", .0.len(), list_paths(.0))]
    MissingFiles(Vec<PathBuf>),
    #[error("single-instance violated: {setup} setup has {} train instances ({})", .ids.len(), .ids.join(", "))]
    DuplicateTrain { setup: SetupKind, ids: Vec<String> },
    #[error("manifest has no train instance")]
    NoTrain,
    #[error("instance id {0:?} appears more than once")]
    DuplicateId(String),
    #[error("test instance {0:?} has no condition label")]
    MissingCondition(String),
    #[error("train instance {0:?} is not nominal")]
    AnomalousTrain(String),
    #[error("instance {id:?}: {message}")]
    InvalidInstance { id: String, message: String },
    #[error("missing evaluation inputs: {} anomaly maps [{}], ground truth for [{}]", .maps.len(), list_paths(.maps), .ground_truth.join(", "))]
    MissingInputs { maps: Vec<PathBuf>, ground_truth: Vec<String> },
    #[error("instance {id:?}: {message}")]
    Pipeline { id: String, message: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl DatasetError {
    /// File-system problems, as opposed to invalid content.
    pub fn is_io(&self) -> bool {
        matches!(self, DatasetError::Io(IoError::File { .. }) | DatasetError::MissingFiles(_) | DatasetError::MissingInputs { .. })
    }
}

fn list_paths(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

/// Origin of an instance's data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetupKind {
    Real,
    Synth,
}

impl std::fmt::Display for SetupKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SetupKind::Real => "real",
            SetupKind::Synth => "synth",
        })
    }
}

/// Benchmark setup: which train instance the method learned from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SetupTag {
    #[serde(rename = "real2real")]
    RealToReal,
    #[serde(rename = "synth2real")]
    SynthToReal,
}

impl SetupTag {
    pub fn train_kind(self) -> SetupKind {
        match self {
            SetupTag::RealToReal => SetupKind::Real,
            SetupTag::SynthToReal => SetupKind::Synth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    /// Grayscale image (PNG).
    pub image: PathBuf,
    /// Depth map (PFM, mm, 0 = invalid).
    pub depth: PathBuf,
    /// `[R_i|T_i]`: this view's sensor frame → reference (mesh) frame.
    pub pose: RigidTransform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Condition>,
    pub setup: SetupKind,
    pub intrinsics: CameraIntrinsics,
    pub sensor_to_camera: RigidTransform,
    pub views: Vec<ViewRecord>,
    pub mesh: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
    pub grid: GridSpec,
}

impl InstanceRecord {
    pub fn chain(&self) -> Result<FrameChain, DatasetError> {
        FrameChain::new(self.sensor_to_camera, self.views.iter().map(|v| v.pose).collect())
            .map_err(|e| DatasetError::InvalidInstance { id: self.id.clone(), message: e.to_string() })
    }

    pub fn condition(&self) -> Condition {
        self.condition.unwrap_or(Condition::Nominal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub object: String,
    /// Background-removal preset class, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    pub instances: Vec<InstanceRecord>,
}

impl DatasetManifest {
    /// Structural invariants, without touching the file system.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut seen = BTreeSet::new();
        for inst in &self.instances {
            if !seen.insert(inst.id.as_str()) {
                return Err(DatasetError::DuplicateId(inst.id.clone()));
            }
            if inst.id.is_empty() || inst.id.contains(['/', '\\']) || inst.id == "." || inst.id == ".." {
                return Err(DatasetError::InvalidInstance { id: inst.id.clone(), message: "ids must be non-empty plain names".into() });
            }
            if inst.views.is_empty() {
                return Err(DatasetError::InvalidInstance { id: inst.id.clone(), message: "no views".into() });
            }
            inst.chain()?;
            match inst.role {
                Role::Train if inst.condition == Some(Condition::Anomalous) => return Err(DatasetError::AnomalousTrain(inst.id.clone())),
                Role::Test if inst.condition.is_none() => return Err(DatasetError::MissingCondition(inst.id.clone())),
                _ => {}
            }
        }
        let mut train: BTreeMap<SetupKind, Vec<String>> = BTreeMap::new();
        for inst in self.instances.iter().filter(|i| i.role == Role::Train) {
            train.entry(inst.setup).or_default().push(inst.id.clone());
        }
        if let Some((&setup, ids)) = train.iter().find(|(_, ids)| ids.len() > 1) {
            return Err(DatasetError::DuplicateTrain { setup, ids: ids.clone() });
        }
        if train.is_empty() {
            return Err(DatasetError::NoTrain);
        }
        Ok(())
    }

    pub fn train(&self, setup: SetupKind) -> Option<&InstanceRecord> {
        self.instances.iter().find(|i| i.role == Role::Train && i.setup == setup)
    }

    pub fn tests(&self) -> impl Iterator<Item = &InstanceRecord> {
        self.instances.iter().filter(|i| i.role == Role::Test)
    }

    /// Every file the manifest references, relative to `root`.
    pub fn referenced_files(&self, root: &Path) -> Vec<PathBuf> {
        let mut files = Vec::new();
        for inst in &self.instances {
            for v in &inst.views {
                files.push(root.join(&v.image));
                files.push(root.join(&v.depth));
            }
            files.push(root.join(&inst.mesh));
            if let Some(gt) = &inst.ground_truth {
                files.push(root.join(gt));
            }
        }
        files
    }
}

/// A validated manifest together with the directory its paths resolve from.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn path(&self, relative: &Path) -> PathBuf {
        self.root.join(relative)
    }
}

/// Reads and validates a manifest; every referenced file must exist.
pub fn load_manifest(path: &Path) -> Result<Dataset, DatasetError> {
    let bytes = io::read_bytes(path)?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes).map_err(|e| DatasetError::Schema { path: path.to_owned(), message: e.to_string() })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(DatasetError::Schema { path: path.to_owned(), message: format!("unsupported version {}", manifest.version) });
    }
    manifest.validate()?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let missing: Vec<PathBuf> = manifest.referenced_files(&root).into_iter().filter(|p| !p.is_file()).collect();
    if !missing.is_empty() {
        return Err(DatasetError::MissingFiles(missing));
    }
    Ok(Dataset { root, manifest })
}

pub fn map_path(maps_dir: &Path, id: &str, view: usize) -> PathBuf {
    maps_dir.join(id).join(format!("view_{view:02}.pfm"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateOptions {
    pub bound: f64,
    pub n_samples: usize,
    pub fpr_domain: FprDomain,
    pub setup: Option<SetupTag>,
    /// Where to write fused volumes (SIMV), if anywhere.
    pub volumes_dir: Option<PathBuf>,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        Self { bound: metrics::DEFAULT_BOUND, n_samples: metrics::DEFAULT_SAMPLES, fpr_domain: FprDomain::default(), setup: None, volumes_dir: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationRun {
    pub setup: Option<SetupTag>,
    pub scores: Vec<InstanceScore>,
    pub report: MetricsReport,
}

/// One test instance's prediction, ready for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInstance {
    pub id: String,
    pub condition: Condition,
    pub volume: AnomalyVolume,
    pub ground_truth: Option<GroundTruthVolume>,
    pub dropped_pixels: Vec<usize>,
}

/// Global scores → I-AUROC; per-anomalous-instance exhaustive PRO curves →
/// mean V-AUPRO. Instances are reported in id order.
pub fn build_report(instances: &[ScoredInstance], options: &EvaluateOptions) -> Result<MetricsReport, DatasetError> {
    let mut order: Vec<&ScoredInstance> = instances.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let per: Vec<(InstanceReport, Option<ProCurve>)> = order
        .par_iter()
        .map(|inst| {
            let g = global_score(&inst.volume);
            let mut rep = InstanceReport {
                id: inst.id.clone(),
                condition: inst.condition,
                score: g.score,
                empty_volume: g.empty,
                v_aupro: None,
                blobs: None,
                dropped_pixels: inst.dropped_pixels.clone(),
                touched_outside_object: None,
                curve: None,
            };
            let mut full = None;
            if inst.condition == Condition::Anomalous {
                let gt = inst.ground_truth.as_ref().ok_or_else(|| DatasetError::Pipeline { id: inst.id.clone(), message: "no ground truth".into() })?;
                let fail = |e: MetricsError| DatasetError::Pipeline { id: inst.id.clone(), message: e.to_string() };
                let curve = metrics::pro_curve_exhaustive(&inst.volume, gt, options.fpr_domain).map_err(fail)?;
                rep.v_aupro = Some(metrics::v_aupro(&curve, options.bound).map_err(fail)?);
                rep.blobs = Some(gt.blob_count());
                rep.touched_outside_object = Some(inst.volume.touched().iter_ones().filter(|&i| !gt.is_occupied(i)).count());
                rep.curve = Some(metrics::pro_curve(&inst.volume, gt, options.n_samples, options.fpr_domain).map_err(fail)?);
                full = Some(curve);
            }
            Ok((rep, full))
        })
        .collect::<Result<_, DatasetError>>()?;
    let scores: Vec<InstanceScore> = per.iter().map(|(r, _)| InstanceScore::new(r.id.clone(), r.score, r.condition)).collect();
    let i_auroc = metrics::i_auroc(&scores)?;
    let aupros: Vec<f64> = per.iter().filter_map(|(r, _)| r.v_aupro).collect();
    let curves: Vec<ProCurve> = per.iter().filter_map(|(_, c)| c.clone()).collect();
    let v_aupro = if aupros.is_empty() { 0.0 } else { aupros.iter().sum::<f64>() / aupros.len() as f64 };
    Ok(MetricsReport {
        i_auroc,
        v_aupro,
        bound: options.bound,
        n_samples: options.n_samples,
        fpr_domain: options.fpr_domain,
        curve: metrics::mean_curve(&curves, options.bound, options.n_samples),
        per_instance: per.into_iter().map(|(r, _)| r).collect(),
    })
}

fn pipeline_err(id: &str) -> impl Fn(String) -> DatasetError + '_ {
    move |message| DatasetError::Pipeline { id: id.to_owned(), message }
}

/// Fuses the anomaly maps of every test instance and scores the test set.
/// Missing maps or ground-truth volumes are all collected and reported
/// before any work starts. Dataset files are only read.
pub fn evaluate(dataset: &Dataset, maps_dir: &Path, options: &EvaluateOptions) -> Result<EvaluationRun, DatasetError> {
    let tests: Vec<&InstanceRecord> = dataset.manifest.tests().collect();
    let mut missing_maps = Vec::new();
    let mut missing_gt = Vec::new();
    for inst in &tests {
        for k in 0..inst.views.len() {
            let p = map_path(maps_dir, &inst.id, k);
            if !p.is_file() {
                missing_maps.push(p);
            }
        }
        if inst.condition() == Condition::Anomalous && !inst.ground_truth.as_ref().is_some_and(|g| dataset.path(g).is_file()) {
            missing_gt.push(inst.id.clone());
        }
    }
    if !missing_maps.is_empty() || !missing_gt.is_empty() {
        return Err(DatasetError::MissingInputs { maps: missing_maps, ground_truth: missing_gt });
    }
    let scored: Vec<ScoredInstance> = tests
        .par_iter()
        .map(|inst| {
            let err = pipeline_err(&inst.id);
            let chain = inst.chain()?;
            let maps = (0..inst.views.len()).map(|k| io::read_pfm(&map_path(maps_dir, &inst.id, k))).collect::<Result<Vec<AnomalyMap2D>, _>>()?;
            let depths = inst.views.iter().map(|v| io::read_depth_pfm(&dataset.path(&v.depth))).collect::<Result<Vec<DepthMap>, _>>()?;
            let (volume, dropped) = fuse_instance(&maps, &depths, &inst.intrinsics, &chain, &inst.grid).map_err(|e| err(e.to_string()))?;
            let ground_truth = match (&inst.ground_truth, inst.condition()) {
                (Some(p), Condition::Anomalous) => {
                    let gt = io::read_ground_truth(&dataset.path(p))?;
                    if *gt.spec() != inst.grid {
                        return Err(err("ground-truth grid differs from the instance grid".into()));
                    }
                    Some(gt)
                }
                _ => None,
            };
            if let Some(dir) = &options.volumes_dir {
                io::write_simv(&dir.join(format!("{}.simv", inst.id)), &SimvVolume::Scores(volume.clone()))?;
            }
            Ok(ScoredInstance { id: inst.id.clone(), condition: inst.condition(), volume, ground_truth, dropped_pixels: dropped })
        })
        .collect::<Result<_, DatasetError>>()?;
    let report = build_report(&scored, options)?;
    let scores = report.per_instance.iter().map(|r| InstanceScore::new(r.id.clone(), r.score, r.condition)).collect();
    Ok(EvaluationRun { setup: options.setup, scores, report })
}

#[derive(Serialize)]
struct TaggedReport<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    setup: Option<SetupTag>,
    #[serde(flatten)]
    report: &'a MetricsReport,
}

/// `report.json` (with the setup tag, if any), the mean curve as
/// `curve.csv`, and one `curves/{id}.csv` per anomalous instance.
pub fn write_report(dir: &Path, report: &MetricsReport, setup: Option<SetupTag>) -> Result<(), IoError> {
    io::write_json(&dir.join("report.json"), &TaggedReport { setup, report })?;
    io::write_bytes(&dir.join("curve.csv"), report.curve.to_csv().as_bytes())?;
    for inst in &report.per_instance {
        if let Some(c) = &inst.curve {
            io::write_bytes(&dir.join("curves").join(format!("{}.csv", inst.id)), c.to_csv().as_bytes())?;
        }
    }
    Ok(())
}

/// Runs the nominal-reference diff detector for every test instance against
/// the train instance of `setup`, writing maps in the evaluation layout.
pub fn run_reference_detector(dataset: &Dataset, setup: SetupKind, maps_dir: &Path) -> Result<usize, DatasetError> {
    let train = dataset.manifest.train(setup).ok_or(DatasetError::NoTrain)?;
    let load = |inst: &InstanceRecord| inst.views.iter().map(|v| io::read_gray_png(&dataset.path(&v.image))).collect::<Result<Vec<GrayImage>, _>>();
    let reference = load(train)?;
    let tests: Vec<&InstanceRecord> = dataset.manifest.tests().collect();
    tests.par_iter().try_for_each(|inst| {
        let images = load(inst)?;
        let maps = synthbench::reference_diff_detector(&images, &reference).map_err(|e| pipeline_err(&inst.id)(e.to_string()))?;
        for (k, m) in maps.iter().enumerate() {
            io::write_pfm(&map_path(maps_dir, &inst.id, k), m)?;
        }
        Ok::<_, DatasetError>(())
    })?;
    Ok(tests.len())
}

/// Renders a full synthetic dataset for `preset` into `out` and returns its
/// manifest (also written as `out/manifest.json`).
pub fn write_synthetic_dataset(preset: &SynthPreset, out: &Path) -> Result<DatasetManifest, DatasetError> {
    let mut jobs: Vec<(String, Role, Option<Condition>, crate::synthbench::SceneSpec)> = vec![("train".into(), Role::Train, None, preset.nominal_scene())];
    for k in 0..preset.nominal_tests {
        jobs.push((format!("nominal_{k:02}"), Role::Test, Some(Condition::Nominal), preset.test_scene(k, false)));
    }
    for k in 0..preset.defective_tests {
        jobs.push((format!("defective_{k:02}"), Role::Test, Some(Condition::Anomalous), preset.test_scene(k, true)));
    }
    // every instance is scanned with the same rig, so they share the mesh frame and grid
    let (world_to_mesh, chain) = synthbench::scan_chain(&preset.scan);
    let nominal_mesh = make_mesh(&preset.nominal_scene()).map_err(|e| pipeline_err("train")(e.to_string()))?.mesh.transformed(&world_to_mesh);
    let grid = grid_from_mesh(&nominal_mesh, preset.voxel_size, preset.grid_padding).map_err(|e| pipeline_err("train")(e.to_string()))?;
    let intr = preset.scan.intrinsics;
    let instances = jobs
        .par_iter()
        .map(|(id, role, condition, scene)| {
            let err = pipeline_err(id);
            let object = make_mesh(scene).map_err(|e| err(e.to_string()))?;
            let mut sim = simulate_scan(&object, &preset.scan).map_err(|e| err(e.to_string()))?;
            // grid is fitted to the nominal shape; dents move inwards so stay inside
            let dir = Path::new(id);
            let mut views = Vec::new();
            for (k, v) in sim.views.iter().enumerate() {
                let image = dir.join("images").join(format!("view_{k:02}.png"));
                let depth = dir.join("depth").join(format!("view_{k:02}.pfm"));
                io::write_gray_png(&out.join(&image), &v.image)?;
                io::write_depth_pfm(&out.join(&depth), &v.depth)?;
                views.push(ViewRecord { image, depth, pose: *chain.view_to_ref(k).expect("view exists") });
            }
            let mesh_path = dir.join("mesh.ply");
            let mut ground_truth = None;
            if *condition == Some(Condition::Anomalous) {
                let scene = MeshScene::new(&sim.mesh).map_err(|e| err(e.to_string()))?;
                for k in 0..sim.views.len() {
                    let mask = render_labels(&scene, &sim.mesh, &intr, &chain.mesh_to_camera(k).expect("view exists"));
                    io::write_annotation_png(&out.join(dir.join("annotations").join(format!("view_{k:02}.png"))), &mask)?;
                }
                let gt = voxelize_labeled_mesh(&sim.mesh, &grid).map_err(|e| err(e.to_string()))?;
                let p = dir.join("ground_truth.simv");
                io::write_simv(&out.join(&p), &SimvVolume::Labels(gt))?;
                ground_truth = Some(p);
            } else {
                sim.mesh = TriangleMesh::new(sim.mesh.vertices().to_vec(), sim.mesh.triangles().to_vec(), None).map_err(|e| err(e.to_string()))?;
            }
            io::write_ply(&out.join(&mesh_path), &sim.mesh, PlyFormat::BinaryLittleEndian)?;
            io::write_json(&out.join(dir.join("setup.json")), &io::ScanSetup::from_chain(intr, &chain))?;
            Ok(InstanceRecord {
                id: id.clone(),
                role: *role,
                condition: *condition,
                setup: SetupKind::Synth,
                intrinsics: intr,
                sensor_to_camera: preset.scan.sensor_to_camera,
                views,
                mesh: mesh_path,
                ground_truth,
                grid,
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    let manifest = DatasetManifest { version: MANIFEST_VERSION, object: format!("synthetic {}", preset.name), class: None, instances };
    manifest.validate()?;
    io::write_json(&out.join("grid.json"), &grid)?;
    io::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
