//! Python bindings: the evaluation pipeline on files, plus the metric
//! primitives on plain lists. Import as `sim3d`.

use std::path::Path;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use sim3d::dataset::{self, DatasetError, EvaluateOptions, SetupKind};
use sim3d::fusion::global_score;
use sim3d::io::{self, IoError};
use sim3d::metrics::{self, Condition, FprDomain, InstanceScore};
use sim3d::raster::AnomalyMap2D;
use sim3d::synthbench::SynthPreset;

/// Binding failure, split the same way as the CLI exit codes.
#[derive(Debug, PartialEq)]
pub enum BindError {
    Io(String),
    Value(String),
}

impl From<IoError> for BindError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::File { .. } => BindError::Io(e.to_string()),
            _ => BindError::Value(e.to_string()),
        }
    }
}

impl From<DatasetError> for BindError {
    fn from(e: DatasetError) -> Self {
        if e.is_io() {
            BindError::Io(e.to_string())
        } else {
            BindError::Value(e.to_string())
        }
    }
}

impl From<metrics::MetricsError> for BindError {
    fn from(e: metrics::MetricsError) -> Self {
        BindError::Value(e.to_string())
    }
}

impl From<BindError> for PyErr {
    fn from(e: BindError) -> Self {
        match e {
            BindError::Io(m) => PyOSError::new_err(m),
            BindError::Value(m) => PyValueError::new_err(m),
        }
    }
}

type Result<T> = std::result::Result<T, BindError>;

pub fn parse_domain(name: &str) -> Result<FprDomain> {
    match name {
        "gt" => Ok(FprDomain::GroundTruthOccupied),
        "touched" => Ok(FprDomain::PredictionTouched),
        _ => Err(BindError::Value(format!("fpr_domain must be \"gt\" or \"touched\", got {name:?}"))),
    }
}

pub fn auroc(scores: &[f64], anomalous: &[bool]) -> Result<f64> {
    if scores.len() != anomalous.len() {
        return Err(BindError::Value(format!("{} scores but {} labels", scores.len(), anomalous.len())));
    }
    let instances: Vec<InstanceScore> = scores
        .iter()
        .zip(anomalous)
        .enumerate()
        .map(|(i, (&s, &a))| InstanceScore::new(i.to_string(), s, if a { Condition::Anomalous } else { Condition::Nominal }))
        .collect();
    Ok(metrics::i_auroc(&instances)?)
}

pub fn volume_curve(volume: &Path, ground_truth: &Path, fpr_domain: &str) -> Result<metrics::ProCurve> {
    let vol = io::read_anomaly_volume(volume)?;
    let gt = io::read_ground_truth(ground_truth)?;
    Ok(metrics::pro_curve_exhaustive(&vol, &gt, parse_domain(fpr_domain)?)?)
}

pub fn evaluate_manifest(manifest: &Path, maps: &Path, out: Option<&Path>, bound: f64, samples: usize, fpr_domain: &str) -> Result<String> {
    let data = dataset::load_manifest(manifest)?;
    let options = EvaluateOptions { bound, n_samples: samples, fpr_domain: parse_domain(fpr_domain)?, ..Default::default() };
    let run = dataset::evaluate(&data, maps, &options)?;
    if let Some(dir) = out {
        dataset::write_report(dir, &run.report, None)?;
    }
    Ok(String::from_utf8(io::encode_json(&run.report)?).expect("JSON is UTF-8"))
}

/// I-AUROC of global scores; `anomalous[i]` labels `scores[i]`.
#[pyfunction]
fn i_auroc(scores: Vec<f64>, anomalous: Vec<bool>) -> PyResult<f64> {
    Ok(auroc(&scores, &anomalous)?)
}

/// Normalized area under the PRO curve up to `bound`, from SIMV files.
#[pyfunction]
#[pyo3(signature = (volume, ground_truth, bound = metrics::DEFAULT_BOUND, fpr_domain = "gt"))]
fn v_aupro(volume: &str, ground_truth: &str, bound: f64, fpr_domain: &str) -> PyResult<f64> {
    let curve = volume_curve(Path::new(volume), Path::new(ground_truth), fpr_domain)?;
    Ok(metrics::v_aupro(&curve, bound).map_err(BindError::from)?)
}

/// Exhaustive PRO curve as `[(fpr, pro), ...]`, from SIMV files.
#[pyfunction]
#[pyo3(signature = (volume, ground_truth, fpr_domain = "gt"))]
fn pro_curve(volume: &str, ground_truth: &str, fpr_domain: &str) -> PyResult<Vec<(f64, f64)>> {
    let curve = volume_curve(Path::new(volume), Path::new(ground_truth), fpr_domain)?;
    Ok(curve.points.iter().map(|p| (p[0], p[1])).collect())
}

/// `(score, empty)` of an anomaly volume file.
#[pyfunction]
fn volume_score(volume: &str) -> PyResult<(f64, bool)> {
    let g = global_score(&io::read_anomaly_volume(Path::new(volume)).map_err(BindError::from)?);
    Ok((g.score, g.empty))
}

/// Validated manifest, re-serialized as JSON.
#[pyfunction]
fn load_manifest(path: &str) -> PyResult<String> {
    let data = dataset::load_manifest(Path::new(path)).map_err(BindError::from)?;
    Ok(String::from_utf8(io::encode_json(&data.manifest).map_err(BindError::from)?).expect("JSON is UTF-8"))
}

/// Fuses and scores a manifest's test set; returns the report JSON and
/// writes the report files when `out` is given.
#[pyfunction]
#[pyo3(signature = (manifest, maps, out = None, bound = metrics::DEFAULT_BOUND, samples = metrics::DEFAULT_SAMPLES, fpr_domain = "gt"))]
fn evaluate(py: Python<'_>, manifest: &str, maps: &str, out: Option<&str>, bound: f64, samples: usize, fpr_domain: &str) -> PyResult<String> {
    Ok(py.detach(|| evaluate_manifest(Path::new(manifest), Path::new(maps), out.map(Path::new), bound, samples, fpr_domain))?)
}

/// JSON of the built-in desk-scale preset, for editing.
#[pyfunction]
fn easy_preset() -> String {
    String::from_utf8(io::encode_json(&SynthPreset::easy()).expect("preset serializes")).expect("JSON is UTF-8")
}

/// Renders a synthetic dataset; returns the instance count.
#[pyfunction]
#[pyo3(signature = (out, preset = None))]
fn make_synthetic(py: Python<'_>, out: &str, preset: Option<&str>) -> PyResult<usize> {
    let preset = match preset {
        Some(json) => serde_json::from_str(json).map_err(|e| PyValueError::new_err(format!("invalid preset: {e}")))?,
        None => SynthPreset::easy(),
    };
    let manifest = py.detach(|| dataset::write_synthetic_dataset(&preset, Path::new(out))).map_err(BindError::from)?;
    Ok(manifest.instances.len())
}

/// Reference-diff anomaly maps for every test instance; returns the count.
#[pyfunction]
#[pyo3(signature = (manifest, out, train = "synth"))]
fn detect_diff(py: Python<'_>, manifest: &str, out: &str, train: &str) -> PyResult<usize> {
    let kind = match train {
        "synth" => SetupKind::Synth,
        "real" => SetupKind::Real,
        _ => return Err(PyValueError::new_err(format!("train must be \"synth\" or \"real\", got {train:?}"))),
    };
    let data = dataset::load_manifest(Path::new(manifest)).map_err(BindError::from)?;
    Ok(py.detach(|| dataset::run_reference_detector(&data, kind, Path::new(out))).map_err(BindError::from)?)
}

/// `(width, height, row-major values)` of a PFM map.
#[pyfunction]
fn read_pfm(path: &str) -> PyResult<(u32, u32, Vec<f32>)> {
    let map = io::read_pfm(Path::new(path)).map_err(BindError::from)?;
    Ok((map.width(), map.height(), map.into_data()))
}

/// Writes a row-major map as PFM.
#[pyfunction]
fn write_pfm(path: &str, width: u32, height: u32, data: Vec<f32>) -> PyResult<()> {
    let map = AnomalyMap2D::new(width, height, data).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(io::write_pfm(Path::new(path), &map).map_err(BindError::from)?)
}

#[pymodule]
#[pyo3(name = "sim3d")]
fn sim3d_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(i_auroc, m)?)?;
    m.add_function(wrap_pyfunction!(v_aupro, m)?)?;
    m.add_function(wrap_pyfunction!(pro_curve, m)?)?;
    m.add_function(wrap_pyfunction!(volume_score, m)?)?;
    m.add_function(wrap_pyfunction!(load_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(easy_preset, m)?)?;
    m.add_function(wrap_pyfunction!(make_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(detect_diff, m)?)?;
    m.add_function(wrap_pyfunction!(read_pfm, m)?)?;
    m.add_function(wrap_pyfunction!(write_pfm, m)?)?;
    m.add("DEFAULT_BOUND", metrics::DEFAULT_BOUND)?;
    Ok(())
}
