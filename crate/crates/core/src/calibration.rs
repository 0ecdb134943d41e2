//! Sensor-to-camera calibration from views of a dot pattern.
//!
//! Each view supplies the dot centres detected in the image, their
//! coordinates in the pattern frame and their coordinates in the sensor
//! (point-cloud) frame. PnP places the pattern in the camera frame; the
//! union of (sensor, camera) dot pairs over all views then feeds a rigid
//! Kabsch–Umeyama fit.

use nalgebra::{DMatrix, Matrix6, Rotation3, UnitQuaternion, Vector6, SVD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, GeometryError, Mat3, RigidTransform, Vec3};

pub const MIN_PNP_POINTS: usize = 6;
pub const MIN_KABSCH_POINTS: usize = 3;

const COLLINEAR_RATIO: f64 = 1e-9;
const COPLANAR_RATIO: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CalibrationError {
    #[error("need at least {required} correspondences, got {got}")]
    TooFewPoints { required: usize, got: usize },
    #[error("{0} pixel and point counts differ")]
    LengthMismatch(&'static str),
    #[error("duplicate pattern point at index {0}")]
    DuplicatePoint(usize),
    #[error("degenerate configuration: {0}")]
    Degenerate(&'static str),
    #[error("no PnP candidate produced a valid pose")]
    NoSolution,
    #[error("view {view}: {source}")]
    View {
        view: usize,
        #[source]
        source: Box<CalibrationError>,
    },
    #[error("holdout set is empty")]
    EmptyHoldout,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Pixel ↔ pattern-frame point pairs from one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondences2D3D {
    pixels: Vec<[f64; 2]>,
    points: Vec<Vec3>,
}

impl Correspondences2D3D {
    pub fn new(pixels: Vec<[f64; 2]>, points: Vec<Vec3>) -> Result<Self, CalibrationError> {
        if pixels.len() != points.len() {
            return Err(CalibrationError::LengthMismatch("pixel/pattern"));
        }
        if points.len() < MIN_PNP_POINTS {
            return Err(CalibrationError::TooFewPoints { required: MIN_PNP_POINTS, got: points.len() });
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| {
            let (p, q) = (&points[a], &points[b]);
            p.x.total_cmp(&q.x).then(p.y.total_cmp(&q.y)).then(p.z.total_cmp(&q.z))
        });
        if let Some(w) = order.windows(2).find(|w| points[w[0]] == points[w[1]]) {
            return Err(CalibrationError::DuplicatePoint(w[0].max(w[1])));
        }
        Ok(Self { pixels, points })
    }

    pub fn pixels(&self) -> &[[f64; 2]] {
        &self.pixels
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Paired points in two frames (`source` is mapped onto `target`).
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondences3D3D {
    source: Vec<Vec3>,
    target: Vec<Vec3>,
}

impl Correspondences3D3D {
    pub fn new(source: Vec<Vec3>, target: Vec<Vec3>) -> Result<Self, CalibrationError> {
        if source.len() != target.len() {
            return Err(CalibrationError::LengthMismatch("source/target"));
        }
        if source.len() < MIN_KABSCH_POINTS {
            return Err(CalibrationError::TooFewPoints { required: MIN_KABSCH_POINTS, got: source.len() });
        }
        if spread(&source).1 <= COLLINEAR_RATIO * spread(&source).0 {
            return Err(CalibrationError::Degenerate("collinear source points"));
        }
        Ok(Self { source, target })
    }

    pub fn source(&self) -> &[Vec3] {
        &self.source
    }

    pub fn target(&self) -> &[Vec3] {
        &self.target
    }
}

/// One calibration view: image correspondences plus the same dots in the sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationView {
    pub image: Correspondences2D3D,
    pub sensor_points: Vec<Vec3>,
}

impl CalibrationView {
    pub fn new(image: Correspondences2D3D, sensor_points: Vec<Vec3>) -> Result<Self, CalibrationError> {
        if sensor_points.len() != image.len() {
            return Err(CalibrationError::LengthMismatch("pattern/sensor"));
        }
        Ok(Self { image, sensor_points })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub estimate: RigidTransform,
    pub residuals: Vec<f64>,
    pub rms: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnpOptions {
    pub restarts: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub seed: u64,
}

impl Default for PnpOptions {
    fn default() -> Self {
        Self { restarts: 20, max_iterations: 100, gradient_tolerance: 1e-12, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpSolution {
    /// Pattern frame → camera frame.
    pub pose: RigidTransform,
    /// Mean Euclidean reprojection error in pixels.
    pub mean_reprojection_error: f64,
    /// Mean reprojection error of every refined candidate, initial estimate first.
    pub candidate_errors: Vec<f64>,
    /// Sum-of-squares cost after each accepted iteration of the winning candidate.
    pub cost_history: Vec<f64>,
}

/// Largest and second-largest singular values of the centred point set, plus the smallest.
fn spread(points: &[Vec3]) -> (f64, f64, f64) {
    let centroid = centroid(points);
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let mut s: Vec<f64> = cov.symmetric_eigenvalues().iter().map(|v| v.max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    (s[0], s[1], s[2])
}

fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64
}

/// Rigid (scale = 1) least-squares alignment of `source` onto `target`.
pub fn kabsch_umeyama(c: &Correspondences3D3D) -> Result<RigidTransform, CalibrationError> {
    let src_c = centroid(&c.source);
    let dst_c = centroid(&c.target);
    let mut h = Mat3::zeros();
    for (a, b) in c.source.iter().zip(&c.target) {
        h += (b - dst_c) * (a - src_c).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    // Singular values come sorted descending, so the last column carries the smallest.
    let d = (u * v_t).determinant().signum();
    let correction = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, if d < 0.0 { -1.0 } else { 1.0 }));
    let rotation = u * correction * v_t;
    let translation = dst_c - rotation * src_c;
    Ok(RigidTransform::new_unchecked(rotation, translation))
}

fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * v_t).determinant();
    u * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d.signum())) * v_t
}

fn null_vector(a: &DMatrix<f64>) -> Option<nalgebra::DVector<f64>> {
    let svd = SVD::new(a.clone(), false, true);
    let v_t = svd.v_t?;
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    Some(v_t.row(idx).transpose())
}

fn normalized_observations(c: &Correspondences2D3D, intr: &CameraIntrinsics) -> Result<Vec<[f64; 2]>, GeometryError> {
    c.pixels
        .iter()
        .map(|uv| {
            let r = intr.pixel_ray(uv[0], uv[1])?;
            Ok([r.x, r.y])
        })
        .collect()
}

/// Direct linear transform on non-coplanar points.
fn dlt_initial_pose(points: &[Vec3], obs: &[[f64; 2]]) -> Option<RigidTransform> {
    let c = centroid(points);
    let mean_dist = points.iter().map(|p| (p - c).norm()).sum::<f64>() / points.len() as f64;
    let k = 3f64.sqrt() / mean_dist;
    let mut a = DMatrix::zeros(2 * points.len(), 12);
    for (i, (p, o)) in points.iter().zip(obs).enumerate() {
        let q = (p - c) * k;
        let xh = [q.x, q.y, q.z, 1.0];
        for j in 0..4 {
            a[(2 * i, j)] = xh[j];
            a[(2 * i, 8 + j)] = -o[0] * xh[j];
            a[(2 * i + 1, 4 + j)] = xh[j];
            a[(2 * i + 1, 8 + j)] = -o[1] * xh[j];
        }
    }
    let mut v = null_vector(&a)?;
    // The centroid maps to (v3, v7, v11); keep it in front of the camera.
    if v[11] < 0.0 {
        v = -v;
    }
    let m = Mat3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
    let p = Vec3::new(v[3], v[7], v[11]);
    let svd = m.svd(false, false);
    let s = svd.singular_values.mean();
    if !(s > 0.0) {
        return None;
    }
    let rotation = orthonormalize(&m);
    let translation = p / (s * k) - rotation * c;
    Some(RigidTransform::new_unchecked(rotation, translation))
}

/// Homography decomposition for a planar pattern.
fn homography_initial_pose(points: &[Vec3], obs: &[[f64; 2]]) -> Option<RigidTransform> {
    let c = centroid(points);
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let e1: Vec3 = eig.eigenvectors.column(order[0]).into();
    let e2: Vec3 = eig.eigenvectors.column(order[1]).into();
    let e3 = e1.cross(&e2);
    let basis = Mat3::from_columns(&[e1, e2, e3]);
    let mean_dist = points.iter().map(|p| (p - c).norm()).sum::<f64>() / points.len() as f64;
    let k = 2f64.sqrt() / mean_dist;

    let mut a = DMatrix::zeros(2 * points.len(), 9);
    for (i, (p, o)) in points.iter().zip(obs).enumerate() {
        let q = basis.transpose() * (p - c) * k;
        let xh = [q.x, q.y, 1.0];
        for j in 0..3 {
            a[(2 * i, j)] = xh[j];
            a[(2 * i, 6 + j)] = -o[0] * xh[j];
            a[(2 * i + 1, 3 + j)] = xh[j];
            a[(2 * i + 1, 6 + j)] = -o[1] * xh[j];
        }
    }
    let h = null_vector(&a)?;
    let h1 = Vec3::new(h[0], h[3], h[6]);
    let h2 = Vec3::new(h[1], h[4], h[7]);
    let h3 = Vec3::new(h[2], h[5], h[8]);
    let mut lambda = (h1.norm() + h2.norm()) / 2.0;
    if !(lambda > 0.0) {
        return None;
    }
    if h3.z < 0.0 {
        lambda = -lambda;
    }
    let r1 = h1 / lambda;
    let r2 = h2 / lambda;
    let plane_rotation = orthonormalize(&Mat3::from_columns(&[r1, r2, r1.cross(&r2)]));
    let t = h3 / lambda;
    let rotation = plane_rotation * basis.transpose();
    let translation = t / k - rotation * c;
    Some(RigidTransform::new_unchecked(rotation, translation))
}

struct Reprojection<'a> {
    points: &'a [Vec3],
    pixels: &'a [[f64; 2]],
    intr: &'a CameraIntrinsics,
}

impl Reprojection<'_> {
    /// Sum of squared pixel residuals; `None` if any point falls behind the camera.
    fn cost(&self, pose: &RigidTransform) -> Option<f64> {
        let mut sum = 0.0;
        for (p, uv) in self.points.iter().zip(self.pixels) {
            let q = self.intr.project_point(&pose.apply(p)).ok()?;
            sum += (q[0] - uv[0]).powi(2) + (q[1] - uv[1]).powi(2);
        }
        sum.is_finite().then_some(sum)
    }

    fn mean_error(&self, pose: &RigidTransform) -> Option<f64> {
        let mut sum = 0.0;
        for (p, uv) in self.points.iter().zip(self.pixels) {
            let q = self.intr.project_point(&pose.apply(p)).ok()?;
            sum += ((q[0] - uv[0]).powi(2) + (q[1] - uv[1]).powi(2)).sqrt();
        }
        Some(sum / self.points.len() as f64)
    }

    /// Normal equations for the left-multiplicative update `R ← exp(ω)R, T ← T + δ`.
    fn normal_equations(&self, pose: &RigidTransform) -> Option<(Matrix6<f64>, Vector6<f64>)> {
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        let intr = self.intr;
        for (p, uv) in self.points.iter().zip(self.pixels) {
            let rp = pose.rotation() * p;
            let pc = rp + pose.translation();
            if !(pc.z > 0.0) {
                return None;
            }
            let (x, y) = (pc.x / pc.z, pc.y / pc.z);
            let (xd, yd) = intr.distort(x, y);
            let r = [intr.fx * xd + intr.cx - uv[0], intr.fy * yd + intr.cy - uv[1]];
            let jd = intr.distort_jacobian(x, y);
            let iz = 1.0 / pc.z;
            // d(x,y)/d(pc)
            let dn = [[iz, 0.0, -x * iz], [0.0, iz, -y * iz]];
            let mut duv = [[0.0; 3]; 2];
            for row in 0..2 {
                let f = if row == 0 { intr.fx } else { intr.fy };
                for col in 0..3 {
                    duv[row][col] = f * (jd[row][0] * dn[0][col] + jd[row][1] * dn[1][col]);
                }
            }
            // d(pc)/dω = −[Rp]×, d(pc)/dδ = I
            let skew = [[0.0, -rp.z, rp.y], [rp.z, 0.0, -rp.x], [-rp.y, rp.x, 0.0]];
            for row in 0..2 {
                let mut j = [0.0; 6];
                for col in 0..3 {
                    j[col] = -(0..3).map(|m| duv[row][m] * skew[m][col]).sum::<f64>();
                    j[3 + col] = duv[row][col];
                }
                for a in 0..6 {
                    jtr[a] += j[a] * r[row];
                    for b in 0..6 {
                        jtj[(a, b)] += j[a] * j[b];
                    }
                }
            }
        }
        Some((jtj, jtr))
    }

    fn step(pose: &RigidTransform, delta: &Vector6<f64>, scale: f64) -> RigidTransform {
        let omega = Vec3::new(delta[0], delta[1], delta[2]) * scale;
        let shift = Vec3::new(delta[3], delta[4], delta[5]) * scale;
        let rotation = Rotation3::new(omega).into_inner() * pose.rotation();
        RigidTransform::new_unchecked(orthonormalize(&rotation), pose.translation() + shift)
    }

    /// Gauss–Newton with step halving; the cost never increases.
    fn refine(&self, start: RigidTransform, opts: &PnpOptions) -> Option<(RigidTransform, Vec<f64>)> {
        let mut pose = start;
        let mut cost = self.cost(&pose)?;
        let mut history = vec![cost];
        for _ in 0..opts.max_iterations {
            let Some((jtj, jtr)) = self.normal_equations(&pose) else { break };
            if jtr.norm() <= opts.gradient_tolerance {
                break;
            }
            let delta = match jtj.cholesky() {
                Some(ch) => -ch.solve(&jtr),
                None => {
                    let damped = jtj + Matrix6::identity() * (1e-9 * jtj.diagonal().amax().max(1e-12));
                    match damped.cholesky() {
                        Some(ch) => -ch.solve(&jtr),
                        None => break,
                    }
                }
            };
            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..30 {
                let candidate = Self::step(&pose, &delta, scale);
                if let Some(c) = self.cost(&candidate) {
                    if c < cost {
                        accepted = Some((candidate, c));
                        break;
                    }
                }
                scale *= 0.5;
            }
            let Some((next, next_cost)) = accepted else { break };
            pose = next;
            cost = next_cost;
            history.push(cost);
        }
        Some((pose, history))
    }
}

/// Pattern-frame → camera-frame pose from 2D–3D correspondences.
pub fn solve_pnp(c: &Correspondences2D3D, intr: &CameraIntrinsics) -> Result<RigidTransform, CalibrationError> {
    Ok(solve_pnp_with(c, intr, &PnpOptions::default())?.pose)
}

pub fn solve_pnp_with(
    c: &Correspondences2D3D,
    intr: &CameraIntrinsics,
    opts: &PnpOptions,
) -> Result<PnpSolution, CalibrationError> {
    let (s1, s2, s3) = spread(&c.points);
    if s2 <= COLLINEAR_RATIO * s1 {
        return Err(CalibrationError::Degenerate("collinear pattern points"));
    }
    let obs = normalized_observations(c, intr)?;
    let initial = if s3 <= COPLANAR_RATIO * s1 {
        homography_initial_pose(&c.points, &obs)
    } else {
        dlt_initial_pose(&c.points, &obs)
    }
    .ok_or(CalibrationError::Degenerate("linear initialization failed"))?;

    let problem = Reprojection { points: &c.points, pixels: &c.pixels, intr };
    let anchor = initial.apply(&centroid(&c.points));
    let centre = centroid(&c.points);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = vec![initial];
    for _ in 0..opts.restarts {
        let q = nalgebra::Quaternion::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let rotation = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
        // Keep the pattern centroid where the linear estimate put it.
        starts.push(RigidTransform::new_unchecked(rotation, anchor - rotation * centre));
    }

    let mut best: Option<PnpSolution> = None;
    let mut candidate_errors = Vec::with_capacity(starts.len());
    for start in starts {
        let Some((pose, history)) = problem.refine(start, opts) else {
            candidate_errors.push(f64::INFINITY);
            continue;
        };
        let err = problem.mean_error(&pose).unwrap_or(f64::INFINITY);
        candidate_errors.push(err);
        if best.as_ref().is_none_or(|b| err < b.mean_reprojection_error) {
            best = Some(PnpSolution {
                pose,
                mean_reprojection_error: err,
                candidate_errors: Vec::new(),
                cost_history: history,
            });
        }
    }
    let mut best = best.filter(|b| b.mean_reprojection_error.is_finite()).ok_or(CalibrationError::NoSolution)?;
    best.candidate_errors = candidate_errors;
    Ok(best)
}

/// `(sensor-frame, camera-frame)` dot centres of one view.
type DotPairs = (Vec<Vec3>, Vec<Vec3>);

/// Camera-frame dot centres of every view, paired with their sensor-frame coordinates.
fn sensor_camera_pairs(views: &[CalibrationView], intr: &CameraIntrinsics) -> Result<Vec<DotPairs>, CalibrationError> {
    views
        .par_iter()
        .enumerate()
        .map(|(i, view)| {
            let pose = solve_pnp(&view.image, intr)
                .map_err(|e| CalibrationError::View { view: i, source: Box::new(e) })?;
            let camera = view.image.points().iter().map(|p| pose.apply(p)).collect();
            Ok((view.sensor_points.clone(), camera))
        })
        .collect()
}

/// `[R_pc|T_pc]`: sensor frame → camera frame, fitted over all views' dots.
pub fn estimate_sensor_to_camera(
    views: &[CalibrationView],
    intr: &CameraIntrinsics,
) -> Result<RigidTransform, CalibrationError> {
    if views.is_empty() {
        return Err(CalibrationError::TooFewPoints { required: 1, got: 0 });
    }
    let (mut source, mut target) = (Vec::new(), Vec::new());
    for (s, c) in sensor_camera_pairs(views, intr)? {
        source.extend(s);
        target.extend(c);
    }
    kabsch_umeyama(&Correspondences3D3D::new(source, target)?)
}

/// Per-dot distance between the sensor points mapped by `estimate` and the
/// pattern points mapped by each holdout view's PnP pose.
pub fn assess_calibration(
    estimate: &RigidTransform,
    holdout: &[CalibrationView],
    intr: &CameraIntrinsics,
) -> Result<CalibrationReport, CalibrationError> {
    if holdout.is_empty() {
        return Err(CalibrationError::EmptyHoldout);
    }
    let residuals: Vec<f64> = sensor_camera_pairs(holdout, intr)?
        .into_iter()
        .flat_map(|(s, c)| s.into_iter().zip(c).map(|(s, c)| (estimate.apply(&s) - c).norm()).collect::<Vec<_>>())
        .collect();
    let rms = (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt();
    let max = residuals.iter().cloned().fold(0.0, f64::max);
    Ok(CalibrationReport { estimate: *estimate, residuals, rms, max })
}
