//! Voxel grids: grid placement, point discretisation, ground-truth volumes
//! from labeled meshes, and anomaly-score volumes.
//!
//! Voxels are stored densely in x-fastest order:
//! `index = x + X·(y + Y·z)`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;
use crate::meshops::{Aabb, TriangleMesh};

/// Ground-truth resolution of the benchmark, mm.
pub const DEFAULT_VOXEL_SIZE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VoxelError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("mesh is empty")]
    EmptyMesh,
    #[error("{} triangles outside the grid (first: {:?})", .0.len(), &.0[..(.0.len().min(8))])]
    TrianglesOutsideGrid(Vec<usize>),
    #[error("grid specs differ")]
    SpecMismatch,
    #[error("{expected} voxels expected, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("voxel {0} is labeled but not occupied")]
    LabelWithoutOccupancy(usize),
    #[error("voxel {0} has a non-finite score or a score without a projection")]
    InvalidScore(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Minimum corner, mm.
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [u32; 3],
}

impl GridSpec {
    pub fn new(origin: [f64; 3], voxel_size: f64, dims: [u32; 3]) -> Result<Self, VoxelError> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(VoxelError::InvalidGrid(format!("voxel size {voxel_size}")));
        }
        if dims.contains(&0) {
            return Err(VoxelError::InvalidGrid(format!("dims {dims:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(VoxelError::InvalidGrid("non-finite origin".into()));
        }
        Ok(Self { origin, voxel_size, dims })
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    pub fn linear(&self, [x, y, z]: [u32; 3]) -> usize {
        x as usize + self.dims[0] as usize * (y as usize + self.dims[1] as usize * z as usize)
    }

    pub fn unlinear(&self, i: usize) -> [u32; 3] {
        let (dx, dy) = (self.dims[0] as usize, self.dims[1] as usize);
        [(i % dx) as u32, ((i / dx) % dy) as u32, (i / (dx * dy)) as u32]
    }

    pub fn bounds(&self) -> Aabb {
        let o = Vec3::from(self.origin);
        Aabb { min: o, max: o + Vec3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64) * self.voxel_size }
    }

    pub fn voxel_centre(&self, v: [u32; 3]) -> Vec3 {
        Vec3::from(self.origin) + Vec3::new(v[0] as f64 + 0.5, v[1] as f64 + 0.5, v[2] as f64 + 0.5) * self.voxel_size
    }

    /// `floor((p − origin) / voxel_size)` per axis; `None` outside the grid.
    pub fn point_to_voxel(&self, p: &Vec3) -> Option<[u32; 3]> {
        let mut out = [0u32; 3];
        for k in 0..3 {
            let f = ((p[k] - self.origin[k]) / self.voxel_size).floor();
            if !(f >= 0.0 && f < self.dims[k] as f64) {
                return None;
            }
            out[k] = f as u32;
        }
        Some(out)
    }

    /// Same region at `factor`× finer resolution.
    pub fn refined(&self, factor: u32) -> Self {
        Self { origin: self.origin, voxel_size: self.voxel_size / factor as f64, dims: self.dims.map(|d| d * factor) }
    }
}

/// Grid covering the mesh's bounding box plus `padding` voxels on every side.
pub fn grid_from_mesh(mesh: &TriangleMesh, voxel_size: f64, padding: u32) -> Result<GridSpec, VoxelError> {
    let bounds = mesh.bounds().filter(|_| !mesh.is_empty()).ok_or(VoxelError::EmptyMesh)?;
    if !(voxel_size > 0.0) {
        return Err(VoxelError::InvalidGrid(format!("voxel size {voxel_size}")));
    }
    let pad = padding as f64 * voxel_size;
    let origin = bounds.min.add_scalar(-pad);
    let dims = [0, 1, 2].map(|k| ((bounds.max[k] - bounds.min[k]) / voxel_size).ceil().max(1.0) as u32 + 2 * padding);
    GridSpec::new(origin.into(), voxel_size, dims)
}

/// Bit-packed boolean per voxel; bit `i` lives in byte `i / 8` at position `i % 8`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelMask {
    len: usize,
    bytes: Vec<u8>,
}

impl VoxelMask {
    pub fn new(len: usize) -> Self {
        Self { len, bytes: vec![0; len.div_ceil(8)] }
    }

    /// Takes a packed buffer; trailing pad bits must be zero.
    pub fn from_bytes(len: usize, bytes: Vec<u8>) -> Option<Self> {
        if bytes.len() != len.div_ceil(8) {
            return None;
        }
        if !len.is_multiple_of(8) && bytes.last().is_some_and(|&b| b >> (len % 8) != 0) {
            return None;
        }
        Some(Self { len, bytes })
    }

    pub fn from_fn(len: usize, f: impl Fn(usize) -> bool) -> Self {
        let mut m = Self::new(len);
        for i in 0..len {
            if f(i) {
                m.set(i, true);
            }
        }
        m
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        self.bytes[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn set(&mut self, i: usize, value: bool) {
        if value {
            self.bytes[i / 8] |= 1 << (i % 8);
        } else {
            self.bytes[i / 8] &= !(1 << (i % 8));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|&i| self.get(i))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn is_superset_of(&self, other: &VoxelMask) -> bool {
        self.len == other.len && self.bytes.iter().zip(&other.bytes).all(|(a, b)| b & !a == 0)
    }
}

/// Object occupancy plus per-voxel defect ID (0 = nominal).
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthVolume {
    spec: GridSpec,
    occupancy: VoxelMask,
    labels: Vec<u16>,
}

impl GroundTruthVolume {
    pub fn new(spec: GridSpec, occupancy: VoxelMask, labels: Vec<u16>) -> Result<Self, VoxelError> {
        let n = spec.voxel_count();
        if occupancy.len() != n || labels.len() != n {
            return Err(VoxelError::SizeMismatch { expected: n, got: labels.len().min(occupancy.len()) });
        }
        if let Some(i) = labels.iter().enumerate().position(|(i, &l)| l != 0 && !occupancy.get(i)) {
            return Err(VoxelError::LabelWithoutOccupancy(i));
        }
        Ok(Self { spec, occupancy, labels })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn occupancy(&self) -> &VoxelMask {
        &self.occupancy
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn is_occupied(&self, i: usize) -> bool {
        self.occupancy.get(i)
    }

    /// Voxel count of every defect ID present.
    pub fn blob_sizes(&self) -> BTreeMap<u16, usize> {
        let mut sizes = BTreeMap::new();
        for &l in self.labels.iter().filter(|&&l| l != 0) {
            *sizes.entry(l).or_insert(0) += 1;
        }
        sizes
    }

    pub fn blob_count(&self) -> usize {
        self.blob_sizes().len()
    }

    pub fn nominal_occupied_count(&self) -> usize {
        self.occupancy.iter_ones().filter(|&i| self.labels[i] == 0).count()
    }
}

/// Per-voxel anomaly scores; `touched` marks voxels that received at least
/// one projected score. Untouched voxels hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyVolume {
    spec: GridSpec,
    scores: Vec<f32>,
    touched: VoxelMask,
}

impl AnomalyVolume {
    pub fn empty(spec: GridSpec) -> Self {
        let n = spec.voxel_count();
        Self { spec, scores: vec![0.0; n], touched: VoxelMask::new(n) }
    }

    pub fn new(spec: GridSpec, scores: Vec<f32>, touched: VoxelMask) -> Result<Self, VoxelError> {
        let n = spec.voxel_count();
        if scores.len() != n || touched.len() != n {
            return Err(VoxelError::SizeMismatch { expected: n, got: scores.len().min(touched.len()) });
        }
        if let Some(i) = (0..n).position(|i| !scores[i].is_finite() || (!touched.get(i) && scores[i] != 0.0)) {
            return Err(VoxelError::InvalidScore(i));
        }
        Ok(Self { spec, scores, touched })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn touched(&self) -> &VoxelMask {
        &self.touched
    }

    pub fn is_touched(&self, i: usize) -> bool {
        self.touched.get(i)
    }

    /// Max-accumulates a score into voxel `i`.
    pub fn accumulate(&mut self, i: usize, score: f32) {
        // folds -0.0 into +0.0 so the stored bits never depend on arrival order
        let score = score + 0.0;
        if !self.touched.get(i) {
            self.touched.set(i, true);
            self.scores[i] = score;
        } else if score > self.scores[i] {
            self.scores[i] = score;
        }
    }

    /// Voxel-wise max with another volume over the same grid.
    pub fn merge_max(&mut self, other: &AnomalyVolume) -> Result<(), VoxelError> {
        if self.spec != other.spec {
            return Err(VoxelError::SpecMismatch);
        }
        for i in other.touched.iter_ones() {
            self.accumulate(i, other.scores[i]);
        }
        Ok(())
    }

    /// Ground truth used as its own prediction: 1 on defect voxels, 0 on the
    /// rest of the object.
    pub fn from_ground_truth(gt: &GroundTruthVolume) -> Self {
        let mut vol = Self::empty(gt.spec);
        for i in gt.occupancy.iter_ones() {
            vol.accumulate(i, if gt.labels[i] != 0 { 1.0 } else { 0.0 });
        }
        vol
    }

    /// Applies `f` to every touched score.
    pub fn map_scores(&self, f: impl Fn(f32) -> f32) -> Self {
        let mut out = self.clone();
        for i in self.touched.iter_ones() {
            out.scores[i] = f(self.scores[i]);
        }
        out
    }
}

/// Separating-axis triangle/box test; touching counts as overlapping.
pub fn triangle_box_overlap(tri: &[Vec3; 3], centre: &Vec3, half: &Vec3) -> bool {
    let v = tri.map(|p| p - centre);
    let edges = [v[1] - v[0], v[2] - v[1], v[0] - v[2]];
    let separated = |axis: &Vec3| {
        let p = v.map(|q| q.dot(axis));
        let r = half.x * axis.x.abs() + half.y * axis.y.abs() + half.z * axis.z.abs();
        p[0].min(p[1]).min(p[2]) > r || p[0].max(p[1]).max(p[2]) < -r
    };
    for k in 0..3 {
        let lo = v[0][k].min(v[1][k]).min(v[2][k]);
        let hi = v[0][k].max(v[1][k]).max(v[2][k]);
        if lo > half[k] || hi < -half[k] {
            return false;
        }
    }
    if separated(&edges[0].cross(&edges[1])) {
        return false;
    }
    for e in &edges {
        for k in 0..3 {
            let mut basis = Vec3::zeros();
            basis[k] = 1.0;
            if separated(&basis.cross(e)) {
                return false;
            }
        }
    }
    true
}

/// Marks every voxel whose box intersects a triangle; a voxel takes the
/// smallest nonzero defect ID among the triangles touching it.
pub fn voxelize_labeled_mesh(mesh: &TriangleMesh, spec: &GridSpec) -> Result<GroundTruthVolume, VoxelError> {
    let grid = spec.bounds();
    let outside: Vec<usize> = (0..mesh.triangles().len())
        .filter(|&t| {
            let [a, b, c] = mesh.triangle(t);
            let bb = Aabb::point(&a).grow(&b).grow(&c);
            !grid.contains(&bb)
        })
        .collect();
    if !outside.is_empty() {
        return Err(VoxelError::TrianglesOutsideGrid(outside));
    }
    let half = Vec3::repeat(spec.voxel_size / 2.0);
    let hits: Vec<(usize, u16)> = (0..mesh.triangles().len())
        .into_par_iter()
        .flat_map_iter(|t| {
            let tri = mesh.triangle(t);
            let label = mesh.triangle_label(t);
            let mut lo = [0u32; 3];
            let mut hi = [0u32; 3];
            for k in 0..3 {
                let min = tri.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
                let max = tri.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
                let top = spec.dims[k] as f64 - 1.0;
                // ceil − 1 also picks up a neighbour whose face the triangle touches
                lo[k] = (((min - spec.origin[k]) / spec.voxel_size).ceil() - 1.0).clamp(0.0, top) as u32;
                hi[k] = ((max - spec.origin[k]) / spec.voxel_size).floor().clamp(0.0, top) as u32;
            }
            let mut out = Vec::new();
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        if triangle_box_overlap(&tri, &spec.voxel_centre([x, y, z]), &half) {
                            out.push((spec.linear([x, y, z]), label));
                        }
                    }
                }
            }
            out
        })
        .collect();
    let mut occupancy = VoxelMask::new(spec.voxel_count());
    let mut labels = vec![0u16; spec.voxel_count()];
    for (i, label) in hits {
        occupancy.set(i, true);
        if label != 0 && (labels[i] == 0 || label < labels[i]) {
            labels[i] = label;
        }
    }
    GroundTruthVolume::new(*spec, occupancy, labels)
}

/// Occupancy max-pooled from a grid refined by `factor` back onto `coarse`.
pub fn max_pool_occupancy(fine: &GroundTruthVolume, coarse: &GridSpec, factor: u32) -> VoxelMask {
    let mut out = VoxelMask::new(coarse.voxel_count());
    for i in fine.occupancy.iter_ones() {
        let [x, y, z] = fine.spec.unlinear(i);
        out.set(coarse.linear([x / factor, y / factor, z / factor]), true);
    }
    out
}
