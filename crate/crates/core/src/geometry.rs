//! Camera model, rigid transforms and the sensor/camera/mesh frame chain.
//!
//! Conventions used throughout the crate:
//!
//! * lengths are millimetres;
//! * pixel coordinates put the centre of pixel `(col, row)` at `(col, row)`;
//! * a [`RigidTransform`] maps `p` to `R·p + T`;
//! * view poses map the sensor frame of view *i* into the sensor frame of
//!   view 1 (`p_ref = R_i·p_view + T_i`), and the mesh frame coincides with
//!   the sensor frame of view 1.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance on `RᵀR − I` and `det R − 1` accepted at construction.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

const UNDISTORT_MAX_ITERATIONS: usize = 50;
const UNDISTORT_TOLERANCE: f64 = 1e-10;
const UNDISTORT_MAX_RADIUS: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("undistortion did not converge (normalized radius {radius:.3}, residual {residual:e})")]
    UndistortionDiverged { radius: f64, residual: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal with det +1 (orthogonality error {orthogonality:e}, det {det})")]
    InvalidRotation { orthogonality: f64, det: f64 },
    #[error("unknown view index {index} (chain has {count} views)")]
    UnknownView { index: usize, count: usize },
    #[error("the first view pose must be the identity")]
    FirstViewNotIdentity,
}

/// Pinhole intrinsics with Brown–Conrady distortion `[k1, k2, k3, p1, p2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    #[serde(rename = "dist")]
    pub distortion: [f64; 5],
}

#[derive(Deserialize)]
struct RawIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    #[serde(default)]
    dist: [f64; 5],
}

impl<'de> Deserialize<'de> for CameraIntrinsics {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = RawIntrinsics::deserialize(deserializer)?;
        CameraIntrinsics::new(raw.fx, raw.fy, raw.cx, raw.cy, raw.width, raw.height, raw.dist)
            .map_err(serde::de::Error::custom)
    }
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        distortion: [f64; 5],
    ) -> Result<Self, GeometryError> {
        let bad = |msg: String| Err(GeometryError::InvalidIntrinsics(msg));
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return bad(format!("focal lengths must be positive, got fx={fx} fy={fy}"));
        }
        if width == 0 || height == 0 {
            return bad(format!("resolution must be at least 1x1, got {width}x{height}"));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return bad(format!("principal point ({cx}, {cy}) outside {width}x{height}"));
        }
        if distortion.iter().any(|d| !d.is_finite()) {
            return bad("distortion coefficients must be finite".into());
        }
        Ok(Self { fx, fy, cx, cy, width, height, distortion })
    }

    /// Distortion-free intrinsics.
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::new(fx, fy, cx, cy, width, height, [0.0; 5])
    }

    pub fn has_distortion(&self) -> bool {
        self.distortion.iter().any(|&d| d != 0.0)
    }

    /// Intrinsics of the image resampled by `scale` (output pixel = input
    /// pixel × scale) with the given output resolution.
    pub fn scaled(&self, scale: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::new(
            self.fx * scale,
            self.fy * scale,
            (self.cx + 0.5) * scale - 0.5,
            (self.cy + 0.5) * scale - 0.5,
            width,
            height,
            self.distortion,
        )
    }

    /// Applies lens distortion to normalized image coordinates.
    pub fn distort(&self, x: f64, y: f64) -> (f64, f64) {
        let [k1, k2, k3, p1, p2] = self.distortion;
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
        let xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
        let yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
        (xd, yd)
    }

    /// Jacobian of [`distort`](Self::distort), row-major `[[dxd/dx, dxd/dy], [dyd/dx, dyd/dy]]`.
    pub fn distort_jacobian(&self, x: f64, y: f64) -> [[f64; 2]; 2] {
        let [k1, k2, k3, p1, p2] = self.distortion;
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
        // d(radial)/d(r2)
        let dradial = k1 + r2 * (2.0 * k2 + 3.0 * k3 * r2);
        let dxd_dx = radial + x * dradial * 2.0 * x + 2.0 * p1 * y + p2 * 6.0 * x;
        let dxd_dy = x * dradial * 2.0 * y + 2.0 * p1 * x + p2 * 2.0 * y;
        let dyd_dx = y * dradial * 2.0 * x + p1 * 2.0 * x + 2.0 * p2 * y;
        let dyd_dy = radial + y * dradial * 2.0 * y + p1 * 6.0 * y + 2.0 * p2 * x;
        [[dxd_dx, dxd_dy], [dyd_dx, dyd_dy]]
    }

    /// Inverts [`distort`](Self::distort): fixed-point iteration, polished with
    /// Newton steps when the fixed point stalls.
    pub fn undistort(&self, xd: f64, yd: f64) -> Result<(f64, f64), GeometryError> {
        if !self.has_distortion() {
            return Ok((xd, yd));
        }
        let residual_at = |x: f64, y: f64| {
            let (ex, ey) = self.distort(x, y);
            ((ex - xd).powi(2) + (ey - yd).powi(2)).sqrt()
        };
        let [k1, k2, k3, p1, p2] = self.distortion;
        let (mut x, mut y) = (xd, yd);
        let mut residual = residual_at(x, y);
        for _ in 0..UNDISTORT_MAX_ITERATIONS {
            if residual <= UNDISTORT_TOLERANCE {
                break;
            }
            let r2 = x * x + y * y;
            let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
            let dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
            let dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
            let (nx, ny) = ((xd - dx) / radial, (yd - dy) / radial);
            if !(nx.is_finite() && ny.is_finite()) {
                break;
            }
            let next = residual_at(nx, ny);
            if next >= residual {
                break;
            }
            x = nx;
            y = ny;
            residual = next;
        }
        for _ in 0..UNDISTORT_MAX_ITERATIONS {
            if residual <= UNDISTORT_TOLERANCE {
                break;
            }
            let (ex, ey) = self.distort(x, y);
            let [[a, b], [c, d]] = self.distort_jacobian(x, y);
            let det = a * d - b * c;
            if det.abs() < 1e-300 {
                break;
            }
            let (rx, ry) = (xd - ex, yd - ey);
            x += (d * rx - b * ry) / det;
            y += (a * ry - c * rx) / det;
            residual = residual_at(x, y);
        }
        let radius = (x * x + y * y).sqrt();
        if residual.is_finite() && residual <= UNDISTORT_TOLERANCE && radius <= UNDISTORT_MAX_RADIUS {
            Ok((x, y))
        } else {
            Err(GeometryError::UndistortionDiverged { radius, residual })
        }
    }

    /// Normalized (z = 1), distortion-free ray direction through a pixel.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Result<Vec3, GeometryError> {
        let xd = (u - self.cx) / self.fx;
        let yd = (v - self.cy) / self.fy;
        let (x, y) = self.undistort(xd, yd)?;
        Ok(Vec3::new(x, y, 1.0))
    }

    pub fn project_point(&self, p: &Vec3) -> Result<[f64; 2], GeometryError> {
        if !(p.z > 0.0) {
            return Err(GeometryError::BehindCamera(p.z));
        }
        let (xd, yd) = self.distort(p.x / p.z, p.y / p.z);
        Ok([self.fx * xd + self.cx, self.fy * yd + self.cy])
    }

    /// Lifts a pixel to the camera frame at the given camera-z depth.
    pub fn unproject_pixel(&self, uv: [f64; 2], depth: f64) -> Result<Vec3, GeometryError> {
        if !(depth > 0.0) {
            return Err(GeometryError::NonPositiveDepth(depth));
        }
        Ok(self.pixel_ray(uv[0], uv[1])? * depth)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Proper rigid motion `p ↦ R·p + T` (millimetres).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        let orthogonality = (rotation.transpose() * rotation - Mat3::identity()).amax();
        let det = rotation.determinant();
        if !(orthogonality <= ROTATION_TOLERANCE && (det - 1.0).abs() <= ROTATION_TOLERANCE)
            || translation.iter().any(|t| !t.is_finite())
        {
            return Err(GeometryError::InvalidRotation { orthogonality, det });
        }
        Ok(Self { rotation, translation })
    }

    /// Builds from an exact rotation object; no validation needed.
    pub fn from_rotation(rotation: Rotation3<f64>, translation: Vec3) -> Self {
        Self { rotation: rotation.into_inner(), translation }
    }

    pub(crate) fn new_unchecked(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn translation_only(t: Vec3) -> Self {
        Self { rotation: Mat3::identity(), translation: t }
    }

    /// Rotation from an axis-angle vector (radians).
    pub fn from_axis_angle(axis_angle: Vec3, translation: Vec3) -> Self {
        Self::from_rotation(Rotation3::new(axis_angle), translation)
    }

    /// Row-major rotation plus translation; the JSON representation.
    pub fn from_row_major(rotation: [f64; 9], translation: [f64; 3]) -> Result<Self, GeometryError> {
        Self::new(Mat3::from_row_slice(&rotation), Vec3::from(translation))
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]]
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Mat3::identity() && self.translation == Vec3::zeros()
    }

    /// Homogeneous 4×4 matrix.
    pub fn to_homogeneous(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Rotation angle (radians) between `self` and `other`.
    pub fn angle_to(&self, other: &RigidTransform) -> f64 {
        let r = self.rotation.transpose() * other.rotation;
        ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

#[derive(Serialize, Deserialize)]
struct RawTransform {
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl Serialize for RigidTransform {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        RawTransform { rotation: self.rotation_row_major(), translation: self.translation.into() }
            .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = RawTransform::deserialize(deserializer)?;
        RigidTransform::from_row_major(raw.rotation, raw.translation).map_err(serde::de::Error::custom)
    }
}

/// `[R_pc|T_pc]` plus one `[R_i|T_i]` per view; view 0 is the reference view.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameChain {
    sensor_to_camera: RigidTransform,
    view_to_ref: Vec<RigidTransform>,
}

impl FrameChain {
    pub fn new(sensor_to_camera: RigidTransform, view_to_ref: Vec<RigidTransform>) -> Result<Self, GeometryError> {
        if let Some(first) = view_to_ref.first() {
            if !first.is_identity() {
                return Err(GeometryError::FirstViewNotIdentity);
            }
        }
        Ok(Self { sensor_to_camera, view_to_ref })
    }

    pub fn sensor_to_camera(&self) -> &RigidTransform {
        &self.sensor_to_camera
    }

    pub fn view_to_ref(&self, view: usize) -> Result<&RigidTransform, GeometryError> {
        self.view_to_ref
            .get(view)
            .ok_or(GeometryError::UnknownView { index: view, count: self.view_to_ref.len() })
    }

    pub fn view_count(&self) -> usize {
        self.view_to_ref.len()
    }

    pub fn views(&self) -> &[RigidTransform] {
        &self.view_to_ref
    }

    /// Mesh frame → camera frame of `view`.
    pub fn mesh_to_camera(&self, view: usize) -> Result<RigidTransform, GeometryError> {
        Ok(self.sensor_to_camera.compose(&self.view_to_ref(view)?.inverse()))
    }

    /// Camera frame of `view` → mesh frame.
    pub fn camera_to_mesh(&self, view: usize) -> Result<RigidTransform, GeometryError> {
        Ok(self.view_to_ref(view)?.compose(&self.sensor_to_camera.inverse()))
    }

    pub fn mesh_vertex_to_view_camera(&self, view: usize, p_mesh: &Vec3) -> Result<Vec3, GeometryError> {
        let to_view = self.view_to_ref(view)?.inverse();
        Ok(self.sensor_to_camera.apply(&to_view.apply(p_mesh)))
    }
}

#[derive(Deserialize)]
struct RawChain {
    sensor_to_camera: RigidTransform,
    view_to_ref: Vec<RigidTransform>,
}

impl<'de> Deserialize<'de> for FrameChain {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = RawChain::deserialize(deserializer)?;
        FrameChain::new(raw.sensor_to_camera, raw.view_to_ref).map_err(serde::de::Error::custom)
    }
}
