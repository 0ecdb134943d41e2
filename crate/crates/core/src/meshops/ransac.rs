use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::MeshError;
use crate::geometry::{Mat3, Vec3};

/// Per-class background-removal presets (`tau`, `alpha` in mm; `null` = no filtering).
pub const BACKGROUND_PRESETS_JSON: &str = include_str!("../../presets/background.json");

/// `{p : normal·p + d = 0}` with unit normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: Vec3,
    pub d: f64,
}

impl Plane {
    pub fn new(normal: Vec3, d: f64) -> Result<Self, MeshError> {
        let n = normal.norm();
        if !(n > 0.0 && n.is_finite() && d.is_finite()) {
            return Err(MeshError::InvalidParameter(format!("plane normal {normal:?} / offset {d}")));
        }
        Ok(Self { normal: normal / n, d: d / n })
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) + self.d
    }

    pub fn flipped(&self) -> Self {
        Self { normal: -self.normal, d: -self.d }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    /// Inlier threshold on point-to-plane distance, mm.
    pub tau: f64,
    pub iterations: usize,
    pub sample_size: usize,
    pub seed: u64,
}

impl RansacParams {
    pub fn new(tau: f64) -> Self {
        Self { tau, iterations: 1000, sample_size: 10, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundPreset {
    pub class: String,
    pub tau: Option<f64>,
    pub alpha: Option<f64>,
}

impl BackgroundPreset {
    pub fn all() -> Vec<BackgroundPreset> {
        #[derive(Deserialize)]
        struct File {
            presets: Vec<BackgroundPreset>,
        }
        serde_json::from_str::<File>(BACKGROUND_PRESETS_JSON).expect("bundled presets parse").presets
    }

    /// Looks a class up by name, ignoring case, spaces and underscores.
    pub fn find(class: &str) -> Option<BackgroundPreset> {
        let key = |s: &str| s.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase();
        Self::all().into_iter().find(|p| key(&p.class) == key(class))
    }

    /// `None` for classes that are not filtered.
    pub fn params(&self) -> Option<(f64, f64)> {
        Some((self.tau?, self.alpha?))
    }
}

/// Total least-squares plane through the points.
pub fn fit_plane_least_squares<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Option<Plane> {
    let pts: Vec<&Vec3> = points.into_iter().collect();
    if pts.len() < 3 {
        return None;
    }
    let centroid = pts.iter().fold(Vec3::zeros(), |a, p| a + *p) / pts.len() as f64;
    let mut cov = Mat3::zeros();
    for p in &pts {
        let d = *p - centroid;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    // Rank < 2 means the sample is collinear.
    if !(eig.eigenvalues[order[1]] > 1e-12 * eig.eigenvalues[order[2]].max(f64::MIN_POSITIVE)) {
        return None;
    }
    let normal: Vec3 = eig.eigenvectors.column(order[0]).into();
    Plane::new(normal, -normal.dot(&centroid)).ok()
}

fn count_inliers(points: &[Vec3], plane: &Plane, tau: f64) -> usize {
    points.iter().filter(|p| plane.signed_distance(p).abs() <= tau).count()
}

/// RANSAC plane fit. Iteration `i` draws its sample from its own ChaCha
/// stream, so results do not depend on thread scheduling. The plane with the
/// largest consensus set (earliest iteration on ties) is refit over its
/// inliers and oriented so most outliers lie on its positive side.
pub fn ransac_plane(points: &[Vec3], params: &RansacParams) -> Result<Plane, MeshError> {
    if params.sample_size < 3 {
        return Err(MeshError::InvalidParameter("sample_size must be at least 3".into()));
    }
    if !(params.tau > 0.0) {
        return Err(MeshError::InvalidParameter(format!("tau must be positive, got {}", params.tau)));
    }
    if points.len() < params.sample_size {
        return Err(MeshError::TooFewPoints { required: params.sample_size, got: points.len() });
    }
    let best = (0..params.iterations)
        .into_par_iter()
        .filter_map(|iteration| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(iteration as u64);
            let sample = rand::seq::index::sample(&mut rng, points.len(), params.sample_size);
            let plane = fit_plane_least_squares(sample.iter().map(|i| &points[i]))?;
            Some((count_inliers(points, &plane, params.tau), iteration, plane))
        })
        .reduce_with(|a, b| if (b.0, std::cmp::Reverse(b.1)) > (a.0, std::cmp::Reverse(a.1)) { b } else { a });
    let Some((_, _, candidate)) = best else {
        return Err(MeshError::InvalidParameter("every RANSAC sample was degenerate".into()));
    };
    let inliers = points.iter().filter(|p| candidate.signed_distance(p).abs() <= params.tau);
    let plane = fit_plane_least_squares(inliers).unwrap_or(candidate);
    Ok(orient(points, plane, params.tau))
}

fn orient(points: &[Vec3], plane: Plane, tau: f64) -> Plane {
    let (mut above, mut below) = (0usize, 0usize);
    let mut outlier_sum = 0.0;
    for p in points {
        let s = plane.signed_distance(p);
        if s.abs() > tau {
            outlier_sum += s;
            if s > 0.0 {
                above += 1;
            } else {
                below += 1;
            }
        }
    }
    let flip = if above != below {
        below > above
    } else if outlier_sum != 0.0 {
        outlier_sum < 0.0
    } else {
        // No outliers to go by: make the dominant normal component positive.
        let n = plane.normal;
        let k = n.iamax();
        n[k] < 0.0
    };
    if flip {
        plane.flipped()
    } else {
        plane
    }
}
