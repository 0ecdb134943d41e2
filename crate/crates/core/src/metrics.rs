//! Detection and segmentation metrics: instance-level AUROC over global
//! scores, and the voxel-level PRO curve / normalised area under it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::voxelgrid::{AnomalyVolume, GridSpec, GroundTruthVolume, VoxelMask};

/// Default FPR integration bound (1 %).
pub const DEFAULT_BOUND: f64 = 0.01;
/// Default number of uniform FPR samples on reported curves.
pub const DEFAULT_SAMPLES: usize = 200;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("AUROC needs at least one nominal and one anomalous instance")]
    SingleClass,
    #[error("instance {0} has a non-finite score")]
    NonFiniteScore(String),
    #[error("ground truth has no defect blobs")]
    NoBlobs,
    #[error("ground truth has no nominal voxels in the FPR domain")]
    NoNominalVoxels,
    #[error("grid specs differ")]
    SpecMismatch,
    #[error("integration bound must be in (0, 1], got {0}")]
    InvalidBound(f64),
    #[error("at least 2 samples required, got {0}")]
    TooFewSamples(usize),
    #[error("empty curve")]
    EmptyCurve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Nominal,
    Anomalous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub id: String,
    pub score: f64,
    pub condition: Condition,
}

impl InstanceScore {
    pub fn new(id: impl Into<String>, score: f64, condition: Condition) -> Self {
        Self { id: id.into(), score, condition }
    }
}

/// Mann–Whitney statistic `P(anom > nom) + ½·P(anom = nom)`, computed from
/// exact integer counts.
pub fn i_auroc(scores: &[InstanceScore]) -> Result<f64, MetricsError> {
    if let Some(s) = scores.iter().find(|s| !s.score.is_finite()) {
        return Err(MetricsError::NonFiniteScore(s.id.clone()));
    }
    let mut nominal: Vec<f64> = scores.iter().filter(|s| s.condition == Condition::Nominal).map(|s| s.score).collect();
    let anomalous: Vec<f64> = scores.iter().filter(|s| s.condition == Condition::Anomalous).map(|s| s.score).collect();
    if nominal.is_empty() || anomalous.is_empty() {
        return Err(MetricsError::SingleClass);
    }
    nominal.sort_by(f64::total_cmp);
    // twice the credit, to stay in integers
    let mut credit: u128 = 0;
    for a in &anomalous {
        let below = nominal.partition_point(|n| n < a) as u128;
        let not_above = nominal.partition_point(|n| n <= a) as u128;
        credit += 2 * below + (not_above - below);
    }
    Ok(credit as f64 / (2 * nominal.len() as u128 * anomalous.len() as u128) as f64)
}

/// Which voxels count as "non-empty" for the false-positive rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FprDomain {
    /// Nominal voxels occupied by the ground-truth object.
    #[default]
    GroundTruthOccupied,
    /// Nominal voxels that received a predicted score.
    PredictionTouched,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryVolume {
    pub spec: GridSpec,
    pub positive: VoxelMask,
}

/// Positive ⇔ touched and `score ≥ t`.
pub fn binarize(vol: &AnomalyVolume, t: f32) -> BinaryVolume {
    let scores = vol.scores();
    let positive = VoxelMask::from_fn(scores.len(), |i| vol.is_touched(i) && scores[i] >= t);
    BinaryVolume { spec: *vol.spec(), positive }
}

/// Mean over defect blobs of the blob fraction covered by positives.
pub fn pro_at(binary: &BinaryVolume, gt: &GroundTruthVolume) -> Result<f64, MetricsError> {
    if binary.spec != *gt.spec() {
        return Err(MetricsError::SpecMismatch);
    }
    let sizes = gt.blob_sizes();
    if sizes.is_empty() {
        return Err(MetricsError::NoBlobs);
    }
    let mut hit: BTreeMap<u16, usize> = BTreeMap::new();
    for i in binary.positive.iter_ones() {
        let l = gt.labels()[i];
        if l != 0 {
            *hit.entry(l).or_insert(0) += 1;
        }
    }
    Ok(sizes.iter().map(|(l, &n)| hit.get(l).copied().unwrap_or(0) as f64 / n as f64).sum::<f64>() / sizes.len() as f64)
}

fn in_domain(gt: &GroundTruthVolume, vol_touched: Option<&VoxelMask>, domain: FprDomain, i: usize) -> bool {
    gt.labels()[i] == 0
        && match domain {
            FprDomain::GroundTruthOccupied => gt.is_occupied(i),
            FprDomain::PredictionTouched => vol_touched.is_some_and(|m| m.get(i)),
        }
}

/// Fraction of nominal domain voxels that are positive. For
/// [`FprDomain::PredictionTouched`] the domain is the positive set's parent
/// volume's touched mask, passed as `touched`.
pub fn fpr_at(binary: &BinaryVolume, gt: &GroundTruthVolume, domain: FprDomain, touched: Option<&VoxelMask>) -> Result<f64, MetricsError> {
    if binary.spec != *gt.spec() {
        return Err(MetricsError::SpecMismatch);
    }
    let n = gt.spec().voxel_count();
    let denom = (0..n).filter(|&i| in_domain(gt, touched, domain, i)).count();
    if denom == 0 {
        return Err(MetricsError::NoNominalVoxels);
    }
    let fp = binary.positive.iter_ones().filter(|&i| in_domain(gt, touched, domain, i)).count();
    Ok(fp as f64 / denom as f64)
}

/// `(fpr, pro)` pairs with non-decreasing FPR, starting at `(0, 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProCurve {
    pub points: Vec<[f64; 2]>,
}

impl ProCurve {
    pub fn max_fpr(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p[0])
    }

    /// PRO at `fpr`, linear between points and flat after the last one.
    pub fn pro_at_fpr(&self, fpr: f64) -> f64 {
        let pts = &self.points;
        let k = pts.partition_point(|p| p[0] <= fpr);
        if k == 0 {
            return 0.0;
        }
        if k == pts.len() {
            return pts[k - 1][1];
        }
        let (a, b) = (pts[k - 1], pts[k]);
        a[1] + (b[1] - a[1]) * (fpr - a[0]) / (b[0] - a[0])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,pro\n");
        for p in &self.points {
            out.push_str(&format!("{},{}\n", p[0], p[1]));
        }
        out
    }
}

/// One distinct score level of a threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepLevel {
    pub threshold: f32,
    pub fpr: f64,
    pub pro: f64,
}

/// Every distinct threshold at which the binarised set changes inside the
/// metric's domain, from the highest score down.
pub fn threshold_sweep(vol: &AnomalyVolume, gt: &GroundTruthVolume, domain: FprDomain) -> Result<Vec<SweepLevel>, MetricsError> {
    if vol.spec() != gt.spec() {
        return Err(MetricsError::SpecMismatch);
    }
    let sizes = gt.blob_sizes();
    if sizes.is_empty() {
        return Err(MetricsError::NoBlobs);
    }
    let blob_index: BTreeMap<u16, usize> = sizes.keys().enumerate().map(|(k, &l)| (l, k)).collect();
    let blob_size: Vec<f64> = sizes.values().map(|&n| n as f64).collect();
    let touched = vol.touched();
    let n = gt.spec().voxel_count();
    let denom = (0..n).filter(|&i| in_domain(gt, Some(touched), domain, i)).count();
    if denom == 0 {
        return Err(MetricsError::NoNominalVoxels);
    }
    // (score, Some(blob) | None = nominal false positive)
    let mut events: Vec<(f32, Option<usize>)> = touched
        .iter_ones()
        .filter_map(|i| match gt.labels()[i] {
            0 => in_domain(gt, Some(touched), domain, i).then_some((vol.scores()[i], None)),
            l => Some((vol.scores()[i], Some(blob_index[&l]))),
        })
        .collect();
    events.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut blob_hits = vec![0usize; blob_size.len()];
    let mut false_pos = 0usize;
    let mut levels = Vec::new();
    let mut k = 0;
    while k < events.len() {
        let t = events[k].0;
        while k < events.len() && events[k].0 == t {
            match events[k].1 {
                Some(b) => blob_hits[b] += 1,
                None => false_pos += 1,
            }
            k += 1;
        }
        let pro = blob_hits.iter().zip(&blob_size).map(|(&h, &s)| h as f64 / s).sum::<f64>() / blob_size.len() as f64;
        levels.push(SweepLevel { threshold: t, fpr: false_pos as f64 / denom as f64, pro });
    }
    Ok(levels)
}

fn curve_from(levels: impl IntoIterator<Item = SweepLevel>) -> ProCurve {
    let mut points: Vec<[f64; 2]> = vec![[0.0, 0.0]];
    for l in levels {
        let p = [l.fpr, l.pro];
        if points.last() != Some(&p) {
            points.push(p);
        }
    }
    ProCurve { points }
}

/// Curve through every distinct threshold.
pub fn pro_curve_exhaustive(vol: &AnomalyVolume, gt: &GroundTruthVolume, domain: FprDomain) -> Result<ProCurve, MetricsError> {
    Ok(curve_from(threshold_sweep(vol, gt, domain)?))
}

/// Curve at `n_samples` FPR targets spread uniformly over `[0, max FPR]`.
/// Each target uses the lowest threshold whose FPR does not exceed it, and the
/// achieved FPR is reported.
pub fn pro_curve(vol: &AnomalyVolume, gt: &GroundTruthVolume, n_samples: usize, domain: FprDomain) -> Result<ProCurve, MetricsError> {
    if n_samples < 2 {
        return Err(MetricsError::TooFewSamples(n_samples));
    }
    let levels = threshold_sweep(vol, gt, domain)?;
    let max_fpr = levels.last().map_or(0.0, |l| l.fpr);
    let picked = (0..n_samples).filter_map(|j| {
        let target = max_fpr * j as f64 / (n_samples - 1) as f64;
        let k = levels.partition_point(|l| l.fpr <= target);
        (k > 0).then(|| levels[k - 1])
    });
    Ok(curve_from(picked))
}

/// Trapezoidal area over `fpr ∈ [0, bound]` divided by `bound`. Segments
/// crossing the bound are cut by linear interpolation; a curve ending before
/// the bound is extended flat with its last PRO.
pub fn v_aupro(curve: &ProCurve, bound: f64) -> Result<f64, MetricsError> {
    if !(bound > 0.0 && bound <= 1.0) {
        return Err(MetricsError::InvalidBound(bound));
    }
    let pts = &curve.points;
    if pts.is_empty() {
        return Err(MetricsError::EmptyCurve);
    }
    let mut area = 0.0;
    for w in pts.windows(2) {
        let ([f0, p0], [f1, p1]) = (w[0], w[1]);
        if f0 >= bound {
            break;
        }
        if f1 <= bound {
            area += (f1 - f0) * (p0 + p1) / 2.0;
        } else {
            let pb = p0 + (p1 - p0) * (bound - f0) / (f1 - f0);
            area += (bound - f0) * (p0 + pb) / 2.0;
        }
    }
    let [f_last, p_last] = pts[pts.len() - 1];
    if f_last < bound {
        area += (bound - f_last) * p_last;
    }
    Ok((area / bound).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub id: String,
    pub condition: Condition,
    pub score: f64,
    /// Set when the instance's fused volume received no projections.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty_volume: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_aupro: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blobs: Option<usize>,
    /// Pixels with valid depth that fell outside the grid, per view.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped_pixels: Vec<usize>,
    /// Positive-at-any-threshold voxels outside the object occupancy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub touched_outside_object: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve: Option<ProCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub i_auroc: f64,
    /// Mean over anomalous instances.
    pub v_aupro: f64,
    pub bound: f64,
    pub n_samples: usize,
    pub fpr_domain: FprDomain,
    /// Mean PRO over anomalous instances at `n_samples` FPRs spread over `[0, bound]`.
    pub curve: ProCurve,
    pub per_instance: Vec<InstanceReport>,
}

/// Averages exhaustive per-instance curves on a common FPR grid over `[0, bound]`.
pub fn mean_curve(curves: &[ProCurve], bound: f64, n_samples: usize) -> ProCurve {
    let points = (0..n_samples)
        .map(|j| {
            let f = bound * j as f64 / (n_samples.max(2) - 1) as f64;
            let pro = if curves.is_empty() { 0.0 } else { curves.iter().map(|c| c.pro_at_fpr(f)).sum::<f64>() / curves.len() as f64 };
            [f, pro]
        })
        .collect();
    ProCurve { points }
}
