//! Synthetic scenes for exercising the whole pipeline without real scans:
//! parametric meshes with injected defects, a ring of cameras around the
//! object, Lambertian headlight renders, and a nominal-reference diff
//! detector.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationView, Correspondences2D3D};
use crate::geometry::{CameraIntrinsics, FrameChain, Mat3, RigidTransform, Vec3};
use crate::meshops::{render_with, MeshError, MeshScene, TriangleMesh};
use crate::raster::{AnomalyMap2D, DepthMap, GrayImage, RasterError};

/// Views per instance in the published object types.
pub const DEFAULT_VIEWS: usize = 12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("defect {index} centre is {distance:.3} mm off the surface")]
    DefectOffSurface { index: usize, distance: f64 },
    #[error("invalid scene: {0}")]
    InvalidSpec(String),
    #[error("{0} test views vs {1} nominal views")]
    ViewCountMismatch(usize, usize),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BaseShape {
    Sphere { radius: f64 },
    Box { size: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
}

impl BaseShape {
    /// Watertight tessellation centred at the origin, outward winding.
    /// Sphere: icosphere subdivided `level` times. Box and cylinder: `2^level`
    /// segments per edge / quarter turn.
    pub fn tessellate(&self, level: u32) -> TriangleMesh {
        let (vertices, triangles) = match *self {
            BaseShape::Sphere { radius } => icosphere(radius, level),
            BaseShape::Box { size } => lattice_box(size, 1 << level),
            BaseShape::Cylinder { radius, height } => cylinder(radius, height, 1 << level),
        };
        let triangles = triangles
            .into_iter()
            .map(|t: [u32; 3]| {
                let [a, b, c] = t.map(|i| vertices[i as usize]);
                if (b - a).cross(&(c - a)).dot(&(a + b + c)) < 0.0 {
                    [t[0], t[2], t[1]]
                } else {
                    t
                }
            })
            .collect();
        TriangleMesh::new(vertices, triangles, None).expect("generated indices are valid")
    }

    /// Distance from `p` to the surface.
    pub fn distance_to_surface(&self, p: &Vec3) -> f64 {
        match *self {
            BaseShape::Sphere { radius } => (p.norm() - radius).abs(),
            BaseShape::Box { size } => {
                let h = Vec3::from(size) / 2.0;
                let q = p.abs() - h;
                let outside = q.sup(&Vec3::zeros()).norm();
                let inside = q.max().min(0.0);
                (outside + inside).abs()
            }
            BaseShape::Cylinder { radius, height } => {
                let dr = (p.x * p.x + p.y * p.y).sqrt() - radius;
                let dz = p.z.abs() - height / 2.0;
                let outside = (dr.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
                (outside + dr.max(dz).min(0.0)).abs()
            }
        }
    }

    /// Distance between two surface points used for defect footprints:
    /// great-circle for spheres, straight-line otherwise.
    pub fn surface_distance(&self, a: &Vec3, b: &Vec3) -> f64 {
        match *self {
            BaseShape::Sphere { radius } => {
                let cos = (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0);
                radius * cos.acos()
            }
            _ => (a - b).norm(),
        }
    }

    /// Point on the surface hit by the ray from the origin along `dir`.
    pub fn surface_point(&self, dir: &Vec3) -> Vec3 {
        let d = dir.normalize();
        let scale = match *self {
            BaseShape::Sphere { radius } => radius,
            BaseShape::Box { size } => (0..3)
                .filter(|&k| d[k] != 0.0)
                .map(|k| size[k] / 2.0 / d[k].abs())
                .fold(f64::INFINITY, f64::min),
            BaseShape::Cylinder { radius, height } => {
                let radial = (d.x * d.x + d.y * d.y).sqrt();
                let side = if radial > 0.0 { radius / radial } else { f64::INFINITY };
                let cap = if d.z != 0.0 { height / 2.0 / d.z.abs() } else { f64::INFINITY };
                side.min(cap)
            }
        };
        d * scale
    }

    /// Half-extent of the bounding box.
    pub fn half_extent(&self) -> Vec3 {
        match *self {
            BaseShape::Sphere { radius } => Vec3::repeat(radius),
            BaseShape::Box { size } => Vec3::from(size) / 2.0,
            BaseShape::Cylinder { radius, height } => Vec3::new(radius, radius, height / 2.0),
        }
    }
}

fn icosphere(radius: f64, level: u32) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vec3> = [
        (-1.0, phi, 0.0), (1.0, phi, 0.0), (-1.0, -phi, 0.0), (1.0, -phi, 0.0),
        (0.0, -1.0, phi), (0.0, 1.0, phi), (0.0, -1.0, -phi), (0.0, 1.0, -phi),
        (phi, 0.0, -1.0), (phi, 0.0, 1.0), (-phi, 0.0, -1.0), (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut t: Vec<[u32; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..level {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(t.len() * 4);
        let mut midpoint = |a: u32, b: u32, v: &mut Vec<Vec3>| {
            let key = (a.min(b), a.max(b));
            *mid.entry(key).or_insert_with(|| {
                v.push(((v[a as usize] + v[b as usize]) / 2.0).normalize());
                (v.len() - 1) as u32
            })
        };
        for [a, b, c] in t {
            let ab = midpoint(a, b, &mut v);
            let bc = midpoint(b, c, &mut v);
            let ca = midpoint(c, a, &mut v);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        t = next;
    }
    (v.into_iter().map(|p| p * radius).collect(), t)
}

fn lattice_box(size: [f64; 3], n: u32) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let mut index: HashMap<[u32; 3], u32> = HashMap::new();
    let mut v = Vec::new();
    let mut t = Vec::new();
    let mut vertex = |l: [u32; 3], v: &mut Vec<Vec3>| {
        *index.entry(l).or_insert_with(|| {
            v.push(Vec3::new(
                size[0] * (l[0] as f64 / n as f64 - 0.5),
                size[1] * (l[1] as f64 / n as f64 - 0.5),
                size[2] * (l[2] as f64 / n as f64 - 0.5),
            ));
            (v.len() - 1) as u32
        })
    };
    for axis in 0..3 {
        let (u, w) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in [0, n] {
            for i in 0..n {
                for j in 0..n {
                    let corner = |di: u32, dj: u32| {
                        let mut l = [0u32; 3];
                        l[axis] = side;
                        l[u] = i + di;
                        l[w] = j + dj;
                        l
                    };
                    let q = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)].map(|l| vertex(l, &mut v));
                    t.push([q[0], q[1], q[2]]);
                    t.push([q[0], q[2], q[3]]);
                }
            }
        }
    }
    (v, t)
}

fn cylinder(radius: f64, height: f64, n: u32) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let around = 4 * n;
    let rings = n.max(1);
    let mut v = Vec::new();
    let mut t = Vec::new();
    for r in 0..=rings {
        let z = height * (r as f64 / rings as f64 - 0.5);
        for k in 0..around {
            let a = std::f64::consts::TAU * k as f64 / around as f64;
            v.push(Vec3::new(radius * a.cos(), radius * a.sin(), z));
        }
    }
    let at = |r: u32, k: u32| r * around + k % around;
    for r in 0..rings {
        for k in 0..around {
            t.push([at(r, k), at(r, k + 1), at(r + 1, k + 1)]);
            t.push([at(r, k), at(r + 1, k + 1), at(r + 1, k)]);
        }
    }
    for (ring, z) in [(0, -height / 2.0), (rings, height / 2.0)] {
        v.push(Vec3::new(0.0, 0.0, z));
        let c = (v.len() - 1) as u32;
        for k in 0..around {
            t.push([c, at(ring, k), at(ring, k + 1)]);
        }
    }
    (v, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    /// Geometry only: the surface is pushed inwards.
    Dent,
    /// Albedo only.
    Appearance,
    /// Both geometry and albedo.
    Contamination,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub kind: DefectKind,
    pub centre: [f64; 3],
    pub radius: f64,
    /// Peak inward displacement (mm) for dents and contamination, albedo delta for appearance.
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: BaseShape,
    pub tessellation: u32,
    pub albedo: f64,
    #[serde(default)]
    pub defects: Vec<DefectSpec>,
}

/// Labeled mesh plus per-vertex albedo.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthObject {
    pub mesh: TriangleMesh,
    pub albedo: Vec<f32>,
}

const SURFACE_TOLERANCE: f64 = 0.5;
/// Contaminated areas are darker than the base material.
const CONTAMINATION_ALBEDO_DELTA: f64 = -0.3;

/// Builds the object; defect `k` gets ID `k + 1` (overlaps keep the smaller ID).
pub fn make_mesh(spec: &SceneSpec) -> Result<SynthObject, SynthError> {
    if !(0.0..=1.0).contains(&spec.albedo) {
        return Err(SynthError::InvalidSpec(format!("albedo {} outside [0, 1]", spec.albedo)));
    }
    let nominal = spec.shape.tessellate(spec.tessellation);
    let normals = nominal.vertex_normals();
    let mut vertices = nominal.vertices().to_vec();
    let mut labels = vec![0u16; vertices.len()];
    let mut albedo = vec![spec.albedo; vertices.len()];
    for (k, defect) in spec.defects.iter().enumerate() {
        if !(defect.radius > 0.0) {
            return Err(SynthError::InvalidSpec(format!("defect {k} radius must be positive")));
        }
        let centre = Vec3::from(defect.centre);
        let distance = spec.shape.distance_to_surface(&centre);
        if distance > SURFACE_TOLERANCE {
            return Err(SynthError::DefectOffSurface { index: k, distance });
        }
        let id = (k + 1) as u16;
        for (i, p) in nominal.vertices().iter().enumerate() {
            let d = spec.shape.surface_distance(p, &centre);
            if d > defect.radius {
                continue;
            }
            if labels[i] == 0 {
                labels[i] = id;
            }
            if matches!(defect.kind, DefectKind::Dent | DefectKind::Contamination) {
                let profile = 0.5 * (1.0 + (std::f64::consts::PI * d / defect.radius).cos());
                vertices[i] -= normals[i] * defect.magnitude * profile;
            }
            if matches!(defect.kind, DefectKind::Appearance | DefectKind::Contamination) {
                let delta = if defect.kind == DefectKind::Contamination { CONTAMINATION_ALBEDO_DELTA } else { defect.magnitude };
                albedo[i] = (albedo[i] + delta).clamp(0.0, 1.0);
            }
        }
    }
    let mesh = TriangleMesh::new(vertices, nominal.triangles().to_vec(), Some(labels))?;
    Ok(SynthObject { mesh, albedo: albedo.into_iter().map(|a| a as f32).collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSpec {
    pub views: usize,
    /// Camera distance from the object centre, mm.
    pub radius: f64,
    /// Camera elevations (degrees); views cycle through them.
    pub elevations_deg: Vec<f64>,
    pub intrinsics: CameraIntrinsics,
    /// `[R_pc|T_pc]` of the simulated sensor.
    pub sensor_to_camera: RigidTransform,
}

impl ScanSpec {
    /// World → camera pose of view `k`: azimuth `2πk/views`, looking at the origin.
    pub fn camera_pose(&self, k: usize) -> RigidTransform {
        let az = std::f64::consts::TAU * k as f64 / self.views as f64;
        let el = self.elevations_deg[k % self.elevations_deg.len()].to_radians();
        let centre = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * self.radius;
        look_at(&centre, &Vec3::zeros())
    }
}

/// World → camera pose of a camera at `eye` (x right, y down, z forward).
pub fn look_at(eye: &Vec3, target: &Vec3) -> RigidTransform {
    let forward = (target - eye).normalize();
    let up = if forward.cross(&Vec3::z()).norm() < 1e-9 { Vec3::y() } else { Vec3::z() };
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    RigidTransform::new_unchecked(rotation, -(rotation * eye))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanView {
    pub image: GrayImage,
    pub depth: DepthMap,
}

/// Output of [`simulate_scan`]: everything in the mesh frame, which coincides
/// with the sensor frame of the first view.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedScan {
    pub mesh: TriangleMesh,
    pub albedo: Vec<f32>,
    pub views: Vec<ScanView>,
    pub chain: FrameChain,
}

/// Frame chain for a scan: `[R_i|T_i]` maps the sensor frame of view `i`
/// into that of view 1, and world → mesh is `(R_pc|T_pc)⁻¹ ∘ pose_1`.
pub fn scan_chain(scan: &ScanSpec) -> (RigidTransform, FrameChain) {
    let s2c = scan.sensor_to_camera;
    let world_to_mesh = s2c.inverse().compose(&scan.camera_pose(0));
    let mesh_to_world = world_to_mesh.inverse();
    let views = (0..scan.views)
        .map(|k| {
            if k == 0 {
                RigidTransform::identity()
            } else {
                scan.camera_pose(k).compose(&mesh_to_world).inverse().compose(&s2c)
            }
        })
        .collect();
    (world_to_mesh, FrameChain::new(s2c, views).expect("first view is identity"))
}

/// Renders shaded images and depths of `object` (given in world coordinates).
pub fn simulate_scan(object: &SynthObject, scan: &ScanSpec) -> Result<SimulatedScan, SynthError> {
    if scan.views == 0 || scan.elevations_deg.is_empty() {
        return Err(SynthError::InvalidSpec("scan needs at least one view and one elevation".into()));
    }
    let (world_to_mesh, chain) = scan_chain(scan);
    let mesh = object.mesh.transformed(&world_to_mesh);
    let normals = mesh.vertex_normals();
    let scene = MeshScene::new(&mesh)?;
    let views = (0..scan.views)
        .into_par_iter()
        .map(|k| {
            let pose = chain.mesh_to_camera(k).expect("view exists");
            let rendered = render_with(&scene, &scan.intrinsics, &pose, (0f32, 0f64), |ray, hit| {
                let [a, b, c] = mesh.triangles()[hit.triangle as usize].map(|i| i as usize);
                let w = [1.0 - hit.u - hit.v, hit.u, hit.v];
                let n = (normals[a] * w[0] + normals[b] * w[1] + normals[c] * w[2]).normalize();
                let alb = object.albedo[a] as f64 * w[0] + object.albedo[b] as f64 * w[1] + object.albedo[c] as f64 * w[2];
                let shade = alb * n.dot(&(-ray.dir.normalize())).max(0.0);
                (shade as f32, hit.t)
            });
            let (w, h) = (rendered.width(), rendered.height());
            let (img, depth): (Vec<f32>, Vec<f64>) = rendered.into_data().into_iter().unzip();
            ScanView { image: GrayImage::new(w, h, img).unwrap(), depth: DepthMap::new(w, h, depth).unwrap() }
        })
        .collect();
    Ok(SimulatedScan { mesh, albedo: object.albedo.clone(), views, chain })
}

/// Per-pixel `|test − nominal|` after 3×3 box smoothing of both images.
pub fn reference_diff_detector(test: &[GrayImage], nominal: &[GrayImage]) -> Result<Vec<AnomalyMap2D>, SynthError> {
    if test.len() != nominal.len() {
        return Err(SynthError::ViewCountMismatch(test.len(), nominal.len()));
    }
    test.par_iter()
        .zip(nominal)
        .map(|(t, n)| {
            t.same_size(n)?;
            let (ts, ns) = (t.box_smooth3(), n.box_smooth3());
            let diff = ts.data().iter().zip(ns.data()).map(|(a, b)| (a - b).abs()).collect();
            Ok(AnomalyMap2D::new(t.width(), t.height(), diff)?)
        })
        .collect()
}

/// The desk-scale benchmark: sphere instances, 12 views at 256², appearance
/// defects on the defective instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthPreset {
    pub name: String,
    pub shape: BaseShape,
    pub tessellation: u32,
    pub albedo: f64,
    pub scan: ScanSpec,
    pub nominal_tests: usize,
    pub defective_tests: usize,
    pub defects_per_instance: (usize, usize),
    pub defect_radius: (f64, f64),
    pub defect_magnitude: f64,
    pub defect_kind: DefectKind,
    pub voxel_size: f64,
    pub grid_padding: u32,
    pub seed: u64,
    /// Half-width of the uniform per-instance albedo offset of test instances.
    #[serde(default)]
    pub albedo_jitter: f64,
}

impl SynthPreset {
    pub fn easy() -> Self {
        let intrinsics = CameraIntrinsics::pinhole(560.0, 560.0, 127.5, 127.5, 256, 256).expect("valid preset");
        Self {
            name: "easy".into(),
            shape: BaseShape::Sphere { radius: 50.0 },
            tessellation: 5,
            albedo: 0.7,
            scan: ScanSpec {
                views: DEFAULT_VIEWS,
                radius: 300.0,
                elevations_deg: vec![20.0, 45.0],
                intrinsics,
                sensor_to_camera: RigidTransform::from_axis_angle(Vec3::new(0.02, -0.03, 0.01), Vec3::new(-60.0, 5.0, 20.0)),
            },
            nominal_tests: 6,
            defective_tests: 6,
            defects_per_instance: (1, 2),
            defect_radius: (10.0, 16.0),
            defect_magnitude: -0.45,
            defect_kind: DefectKind::Appearance,
            voxel_size: 2.0,
            grid_padding: 2,
            seed: 7,
            albedo_jitter: 0.01,
        }
    }

    pub fn nominal_scene(&self) -> SceneSpec {
        SceneSpec { shape: self.shape, tessellation: self.tessellation, albedo: self.albedo, defects: Vec::new() }
    }

    /// Test scene: nominal or defective `index`, with its albedo offset.
    pub fn test_scene(&self, index: usize, defective: bool) -> SceneSpec {
        let mut scene = if defective { self.defective_scene(index) } else { self.nominal_scene() };
        if self.albedo_jitter > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(1_000_000 + 2 * index as u64 + defective as u64);
            scene.albedo = (scene.albedo + rng.random_range(-self.albedo_jitter..=self.albedo_jitter)).clamp(0.0, 1.0);
        }
        scene
    }

    /// Defective scene `index`, with defect centres drawn at elevations the camera ring sees.
    pub fn defective_scene(&self, index: usize) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 + 1);
        let count = rng.random_range(self.defects_per_instance.0..=self.defects_per_instance.1);
        let mut defects: Vec<DefectSpec> = Vec::new();
        while defects.len() < count {
            let az = rng.random_range(0.0..std::f64::consts::TAU);
            let el = rng.random_range(-5f64..60.0).to_radians();
            let dir = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let centre = self.shape.surface_point(&dir);
            let radius = rng.random_range(self.defect_radius.0..=self.defect_radius.1);
            // keep defects apart so each blob stays separate
            if defects.iter().any(|d| (Vec3::from(d.centre) - centre).norm() < d.radius + radius + 4.0 * self.voxel_size) {
                continue;
            }
            defects.push(DefectSpec { kind: self.defect_kind, centre: centre.into(), radius, magnitude: self.defect_magnitude });
        }
        SceneSpec { defects, ..self.nominal_scene() }
    }
}

/// Dot-pattern calibration views seen by a sensor with the given `[R_pc|T_pc]`.
pub fn synthetic_calibration_views(
    rng: &mut impl Rng,
    sensor_to_camera: &RigidTransform,
    intr: &CameraIntrinsics,
    views: usize,
    pixel_noise: f64,
    sensor_noise: f64,
) -> Vec<CalibrationView> {
    let pattern: Vec<Vec3> = (0..7)
        .flat_map(|i| (0..7).map(move |j| Vec3::new(i as f64 * 20.0 - 60.0, j as f64 * 20.0 - 60.0, 0.0)))
        .collect();
    let pn = Normal::new(0.0, pixel_noise.max(f64::MIN_POSITIVE)).unwrap();
    let sn = Normal::new(0.0, sensor_noise.max(f64::MIN_POSITIVE)).unwrap();
    let to_sensor = sensor_to_camera.inverse();
    (0..views)
        .map(|_| {
            let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3));
            let tilt = RigidTransform::from_axis_angle(axis.normalize() * rng.random_range(0.1..0.6), Vec3::zeros());
            let shift = Vec3::new(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0), 500.0 + rng.random_range(-50.0..50.0));
            let pose = RigidTransform::translation_only(shift).compose(&tilt);
            let pixels = pattern
                .iter()
                .map(|p| {
                    let uv = intr.project_point(&pose.apply(p)).expect("pattern in front of camera");
                    if pixel_noise > 0.0 {
                        [uv[0] + rng.sample(pn), uv[1] + rng.sample(pn)]
                    } else {
                        uv
                    }
                })
                .collect();
            let sensor = pattern
                .iter()
                .map(|p| {
                    let s = to_sensor.apply(&pose.apply(p));
                    if sensor_noise > 0.0 {
                        s + Vec3::new(rng.sample(sn), rng.sample(sn), rng.sample(sn))
                    } else {
                        s
                    }
                })
                .collect();
            let image = Correspondences2D3D::new(pixels, pattern.clone()).expect("valid pattern");
            CalibrationView::new(image, sensor).expect("matching lengths")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshops::Sphere;

    fn edge_use_counts(mesh: &TriangleMesh) -> HashMap<(u32, u32), usize> {
        let mut edges = HashMap::new();
        for t in mesh.triangles() {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        edges
    }

    #[test]
    fn shapes_are_watertight() {
        for shape in [
            BaseShape::Sphere { radius: 30.0 },
            BaseShape::Box { size: [40.0, 20.0, 10.0] },
            BaseShape::Cylinder { radius: 15.0, height: 40.0 },
        ] {
            let mesh = shape.tessellate(3);
            assert!(edge_use_counts(&mesh).values().all(|&c| c == 2), "{shape:?}");
            for v in mesh.vertices() {
                assert!(shape.distance_to_surface(v) < 1e-9);
            }
        }
    }

    #[test]
    fn nominal_sphere_has_no_labels() {
        let spec = SceneSpec { shape: BaseShape::Sphere { radius: 30.0 }, tessellation: 3, albedo: 0.5, defects: vec![] };
        let obj = make_mesh(&spec).unwrap();
        assert!(obj.mesh.labels().unwrap().iter().all(|&l| l == 0));
        assert!(edge_use_counts(&obj.mesh).values().all(|&c| c == 2));
    }

    #[test]
    fn dent_labels_vertices_within_geodesic_radius() {
        let r = 30.0;
        let centre = Vec3::new(0.0, 0.0, r);
        let spec = SceneSpec {
            shape: BaseShape::Sphere { radius: r },
            tessellation: 4,
            albedo: 0.5,
            defects: vec![DefectSpec { kind: DefectKind::Dent, centre: centre.into(), radius: 10.0, magnitude: 1.0 }],
        };
        let obj = make_mesh(&spec).unwrap();
        let nominal = spec.shape.tessellate(4);
        for (i, p) in nominal.vertices().iter().enumerate() {
            let geodesic = r * (p.dot(&centre) / (r * r)).clamp(-1.0, 1.0).acos();
            let labeled = obj.mesh.labels().unwrap()[i] == 1;
            assert_eq!(labeled, geodesic <= 10.0);
            let moved = (obj.mesh.vertices()[i] - p).norm();
            if labeled {
                assert!(obj.mesh.vertices()[i].norm() < r + 1e-9);
            } else {
                assert_eq!(moved, 0.0);
            }
        }
        assert!(obj.mesh.labels().unwrap().contains(&1));
    }

    #[test]
    fn appearance_defect_leaves_geometry_untouched() {
        let shape = BaseShape::Box { size: [40.0, 40.0, 40.0] };
        let spec = SceneSpec {
            shape,
            tessellation: 3,
            albedo: 0.5,
            defects: vec![DefectSpec { kind: DefectKind::Appearance, centre: [0.0, 0.0, 20.0], radius: 8.0, magnitude: 0.3 }],
        };
        let obj = make_mesh(&spec).unwrap();
        assert_eq!(obj.mesh.vertices(), shape.tessellate(3).vertices());
        assert!(obj.albedo.iter().any(|&a| (a - 0.8).abs() < 1e-6));
    }

    #[test]
    fn off_surface_defect_rejected() {
        let spec = SceneSpec {
            shape: BaseShape::Sphere { radius: 30.0 },
            tessellation: 2,
            albedo: 0.5,
            defects: vec![DefectSpec { kind: DefectKind::Dent, centre: [0.0, 0.0, 0.0], radius: 5.0, magnitude: 1.0 }],
        };
        assert!(matches!(make_mesh(&spec), Err(SynthError::DefectOffSurface { index: 0, .. })));
    }

    fn small_scan(views: usize) -> ScanSpec {
        ScanSpec {
            views,
            radius: 200.0,
            elevations_deg: vec![30.0],
            intrinsics: CameraIntrinsics::pinhole(200.0, 200.0, 31.5, 31.5, 64, 64).unwrap(),
            sensor_to_camera: RigidTransform::from_axis_angle(Vec3::new(0.1, 0.0, 0.05), Vec3::new(-40.0, 0.0, 10.0)),
        }
    }

    #[test]
    fn scan_chain_conventions() {
        let scan = small_scan(12);
        let (world_to_mesh, chain) = scan_chain(&scan);
        assert!(chain.view_to_ref(0).unwrap().is_identity());
        for k in 0..12 {
            let direct = scan.camera_pose(k).compose(&world_to_mesh.inverse());
            let via_chain = chain.mesh_to_camera(k).unwrap();
            assert!((direct.to_homogeneous() - via_chain.to_homogeneous()).amax() < 1e-9);
        }
    }

    #[test]
    fn scan_depth_matches_exact_sphere_within_tessellation_error() {
        let r = 30.0;
        let obj = make_mesh(&SceneSpec { shape: BaseShape::Sphere { radius: r }, tessellation: 5, albedo: 0.5, defects: vec![] }).unwrap();
        let scan = small_scan(3);
        let out = simulate_scan(&obj, &scan).unwrap();
        let (world_to_mesh, _) = scan_chain(&scan);
        let centre = *world_to_mesh.translation();
        let sphere = Sphere { centre, radius: r };
        // level-5 icosphere facets sit at most ~0.006 mm inside the r = 30 sphere
        for (k, view) in out.views.iter().enumerate() {
            let pose = out.chain.mesh_to_camera(k).unwrap();
            let exact = crate::meshops::render_depth(&sphere, &scan.intrinsics, &pose);
            let mut hits = 0;
            for (i, (a, b)) in view.depth.data().iter().zip(exact.data()).enumerate() {
                if *a > 0.0 {
                    let uv = [(i % 64) as f64, (i / 64) as f64];
                    let p = pose.inverse().apply(&scan.intrinsics.unproject_pixel(uv, *a).unwrap());
                    let radial = (p - centre).norm();
                    assert!(radial <= r + 1e-9 && radial > r - 0.01, "radius {radial}");
                    assert!(*b > 0.0 && *a >= *b - 1e-9);
                    hits += 1;
                }
            }
            assert!(hits > 500);
        }
    }

    #[test]
    fn appearance_defects_do_not_change_depth() {
        let nominal = SceneSpec { shape: BaseShape::Sphere { radius: 30.0 }, tessellation: 4, albedo: 0.5, defects: vec![] };
        let mut defective = nominal.clone();
        defective.defects.push(DefectSpec { kind: DefectKind::Appearance, centre: [30.0, 0.0, 0.0], radius: 8.0, magnitude: -0.3 });
        let scan = small_scan(4);
        let a = simulate_scan(&make_mesh(&nominal).unwrap(), &scan).unwrap();
        let b = simulate_scan(&make_mesh(&defective).unwrap(), &scan).unwrap();
        for (x, y) in a.views.iter().zip(&b.views) {
            assert_eq!(x.depth, y.depth);
        }
        assert!(a.views.iter().zip(&b.views).any(|(x, y)| x.image != y.image));
        // deterministic
        assert_eq!(simulate_scan(&make_mesh(&defective).unwrap(), &scan).unwrap(), b);
    }

    #[test]
    fn dent_changes_image_only_near_defect() {
        let nominal = SceneSpec { shape: BaseShape::Sphere { radius: 30.0 }, tessellation: 4, albedo: 0.5, defects: vec![] };
        let mut dented = nominal.clone();
        dented.defects.push(DefectSpec { kind: DefectKind::Dent, centre: [30.0, 0.0, 0.0], radius: 8.0, magnitude: 3.0 });
        let scan = small_scan(1);
        let a = simulate_scan(&make_mesh(&nominal).unwrap(), &scan).unwrap();
        let b = simulate_scan(&make_mesh(&dented).unwrap(), &scan).unwrap();
        let intr = scan.intrinsics;
        let pose = a.chain.mesh_to_camera(0).unwrap();
        let (world_to_mesh, _) = scan_chain(&scan);
        let centre = pose.apply(&world_to_mesh.apply(&Vec3::new(30.0, 0.0, 0.0)));
        let c = intr.project_point(&centre).unwrap();
        let mut changed = 0;
        for row in 0..64u32 {
            for col in 0..64u32 {
                if a.views[0].image.get(col, row) != b.views[0].image.get(col, row) {
                    changed += 1;
                    let dist = ((col as f64 - c[0]).powi(2) + (row as f64 - c[1]).powi(2)).sqrt();
                    // defect radius plus one ring of triangles, in pixels
                    assert!(dist < 18.0, "change at ({col},{row}) {dist}px from defect");
                }
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn detector_cases() {
        let img = GrayImage::filled(16, 16, 0.4);
        let maps = reference_diff_detector(std::slice::from_ref(&img), std::slice::from_ref(&img)).unwrap();
        assert!(maps[0].data().iter().all(|&v| v == 0.0));
        let mut blob = img.clone();
        for r in 6..=8 {
            for c in 9..=11 {
                blob.set(c, r, 0.9);
            }
        }
        let maps = reference_diff_detector(&[blob], std::slice::from_ref(&img)).unwrap();
        let data = maps[0].data();
        let argmax = (0..data.len()).max_by(|&a, &b| data[a].total_cmp(&data[b]).then(b.cmp(&a))).unwrap();
        assert_eq!((argmax % 16, argmax / 16), (10, 7));
        assert!(data.iter().all(|&v| v >= 0.0));
        assert!(matches!(reference_diff_detector(std::slice::from_ref(&img), &[]), Err(SynthError::ViewCountMismatch(1, 0))));
        assert!(reference_diff_detector(&[img], &[GrayImage::filled(8, 8, 0.0)]).is_err());
    }

    #[test]
    fn easy_preset_defects_are_on_surface() {
        let preset = SynthPreset::easy();
        for i in 0..preset.defective_tests {
            let scene = preset.defective_scene(i);
            assert!(!scene.defects.is_empty());
            make_mesh(&scene).unwrap();
        }
        assert_eq!(preset.scan.views, 12);
    }
}
