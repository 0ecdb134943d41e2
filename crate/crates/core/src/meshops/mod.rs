//! Mesh pre-processing: plane-based background removal, ray casting and
//! depth rendering.

mod bvh;
mod ransac;
mod render;

pub use bvh::{intersect_triangle, Aabb, BruteForce, Bvh, Hit, MeshScene, Ray, RayCaster, Sphere};
pub use ransac::{fit_plane_least_squares, ransac_plane, BackgroundPreset, Plane, RansacParams, BACKGROUND_PRESETS_JSON};
pub use render::{depth_to_pointcloud, render_depth, render_with, OrganizedPointCloud, SENSOR_HEIGHT, SENSOR_WIDTH, DOWNSAMPLED_SIZE};

use crate::geometry::Vec3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MeshError {
    #[error("triangle {triangle} references vertex {index}, mesh has {count}")]
    IndexOutOfRange { triangle: usize, index: u32, count: usize },
    #[error("{labels} labels for {vertices} vertices")]
    LabelCount { labels: usize, vertices: usize },
    #[error("non-finite vertex {0}")]
    NonFiniteVertex(usize),
    #[error("mesh is empty")]
    Empty,
    #[error("need at least {required} points, got {got}")]
    TooFewPoints { required: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("resolution mismatch: depth map {0}x{1}, intrinsics {2}x{3}")]
    ResolutionMismatch(u32, u32, u32, u32),
}

/// Indexed triangle mesh with optional per-vertex defect IDs (0 = nominal).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
    labels: Option<Vec<u16>>,
}

impl TriangleMesh {
    /// Validates indices and labels; zero-area triangles are dropped.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>, labels: Option<Vec<u16>>) -> Result<Self, MeshError> {
        if let Some(i) = vertices.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(MeshError::NonFiniteVertex(i));
        }
        for (t, tri) in triangles.iter().enumerate() {
            if let Some(&index) = tri.iter().find(|&&i| i as usize >= vertices.len()) {
                return Err(MeshError::IndexOutOfRange { triangle: t, index, count: vertices.len() });
            }
        }
        if let Some(l) = &labels {
            if l.len() != vertices.len() {
                return Err(MeshError::LabelCount { labels: l.len(), vertices: vertices.len() });
            }
        }
        let before = triangles.len();
        let triangles: Vec<[u32; 3]> = triangles
            .into_iter()
            .filter(|t| {
                let [a, b, c] = t.map(|i| vertices[i as usize]);
                (b - a).cross(&(c - a)).norm() > 0.0
            })
            .collect();
        if triangles.len() != before {
            log::debug!("dropped {} degenerate triangles", before - triangles.len());
        }
        Ok(Self { vertices, triangles, labels })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn labels(&self) -> Option<&[u16]> {
        self.labels.as_deref()
    }

    pub fn label(&self, vertex: usize) -> u16 {
        self.labels.as_ref().map_or(0, |l| l[vertex])
    }

    pub fn with_labels(mut self, labels: Vec<u16>) -> Result<Self, MeshError> {
        if labels.len() != self.vertices.len() {
            return Err(MeshError::LabelCount { labels: labels.len(), vertices: self.vertices.len() });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    /// Defect ID of a triangle: the smallest nonzero vertex label.
    pub fn triangle_label(&self, t: usize) -> u16 {
        let Some(labels) = &self.labels else { return 0 };
        self.triangles[t].iter().map(|&i| labels[i as usize]).filter(|&l| l != 0).min().unwrap_or(0)
    }

    pub fn bounds(&self) -> Option<Aabb> {
        let mut it = self.vertices.iter();
        let first = it.next()?;
        Some(it.fold(Aabb::point(first), |b, v| b.grow(v)))
    }

    /// Area-weighted vertex normals.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut normals = vec![Vec3::zeros(); self.vertices.len()];
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| self.vertices[i as usize]);
            let n = (b - a).cross(&(c - a));
            for &i in t {
                normals[i as usize] += n;
            }
        }
        normals.iter().map(|n| n.try_normalize(0.0).unwrap_or_else(Vec3::z)).collect()
    }

    /// Applies a transform to every vertex.
    pub fn transformed(&self, t: &crate::geometry::RigidTransform) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| t.apply(v)).collect(),
            triangles: self.triangles.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// Result of [`remove_background`]; `empty` flags that nothing survived.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundRemoval {
    pub mesh: TriangleMesh,
    pub removed_vertices: usize,
    pub empty: bool,
}

/// Drops every vertex not strictly above the plane shifted by `alpha` along
/// its normal (positive `alpha` cuts deeper into the object), along with the
/// triangles touching them.
pub fn remove_background(mesh: &TriangleMesh, plane: &Plane, alpha: f64) -> BackgroundRemoval {
    let keep: Vec<bool> = mesh.vertices.iter().map(|p| plane.signed_distance(p) - alpha > 0.0).collect();
    let mut remap = vec![u32::MAX; mesh.vertices.len()];
    let mut vertices = Vec::new();
    let mut labels = mesh.labels.as_ref().map(|_| Vec::new());
    for (i, v) in mesh.vertices.iter().enumerate() {
        if keep[i] {
            remap[i] = vertices.len() as u32;
            vertices.push(*v);
            if let (Some(out), Some(src)) = (labels.as_mut(), mesh.labels.as_ref()) {
                out.push(src[i]);
            }
        }
    }
    let triangles: Vec<[u32; 3]> = mesh
        .triangles
        .iter()
        .filter(|t| t.iter().all(|&i| keep[i as usize]))
        .map(|t| t.map(|i| remap[i as usize]))
        .collect();
    let removed_vertices = mesh.vertices.len() - vertices.len();
    let empty = vertices.is_empty();
    if empty {
        log::warn!("background removal left an empty mesh");
    }
    BackgroundRemoval { mesh: TriangleMesh { vertices, triangles, labels }, removed_vertices, empty }
}
