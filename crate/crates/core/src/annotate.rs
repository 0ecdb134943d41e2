//! From 2D defect masks to labeled meshes and ground-truth volumes.
//!
//! Each mesh vertex is projected into every annotated view; if it survives a
//! z-buffer test against the mesh's own rendered depth and lands on a nonzero
//! pixel, it gets a vote for that ID. Votes are settled by majority, ties going
//! to the smaller ID.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, FrameChain, GeometryError, RigidTransform};
use crate::meshops::{render_depth, render_with, MeshError, MeshScene, RayCaster, TriangleMesh};
use crate::raster::{AnnotationImage, Raster};
use crate::voxelgrid::{voxelize_labeled_mesh, GridSpec, GroundTruthVolume, VoxelError, DEFAULT_VOXEL_SIZE};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnnotateError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error("annotation for view {view} is {got:?}, camera is {expected:?}")]
    ResolutionMismatch { view: usize, got: (u32, u32), expected: (u32, u32) },
}

/// One annotated view: the mask and the index of its pose in the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedView {
    pub view: usize,
    pub mask: AnnotationImage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiftOptions {
    /// Depth slack of the visibility test, mm (one voxel by default).
    pub visibility_tolerance: f64,
}

impl Default for LiftOptions {
    fn default() -> Self {
        Self { visibility_tolerance: DEFAULT_VOXEL_SIZE }
    }
}

/// A vertex that received votes for more than one defect ID.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VertexConflict {
    pub vertex: u32,
    /// `(id, votes)` in ascending ID order.
    pub votes: Vec<(u16, u32)>,
    pub chosen: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftResult {
    pub mesh: TriangleMesh,
    pub conflicts: Vec<VertexConflict>,
    /// Per vertex, the number of annotated views it was visible in.
    pub visible_in: Vec<u32>,
}

/// Per-vertex votes `(vertex, id)` of one view plus its visibility mask.
fn view_votes(
    mesh: &TriangleMesh,
    scene: &MeshScene,
    intr: &CameraIntrinsics,
    pose: &RigidTransform,
    mask: &AnnotationImage,
    tolerance: f64,
) -> (Vec<(u32, u16)>, Vec<bool>) {
    let depth = render_depth(scene, intr, pose);
    let mut votes = Vec::new();
    let mut visible = vec![false; mesh.vertices().len()];
    for (i, p) in mesh.vertices().iter().enumerate() {
        let q = pose.apply(p);
        let Ok([u, v]) = intr.project_point(&q) else { continue };
        let (col, row) = (u.round(), v.round());
        if !(col >= 0.0 && row >= 0.0 && col < intr.width as f64 && row < intr.height as f64) {
            continue;
        }
        let (col, row) = (col as u32, row as u32);
        // an empty z-buffer pixel has nothing in front of the vertex
        let z = depth.get(col, row);
        if z > 0.0 && q.z > z + tolerance {
            continue;
        }
        visible[i] = true;
        let id = mask.get(col, row);
        if id != 0 {
            votes.push((i as u32, id));
        }
    }
    (votes, visible)
}

/// Transfers mask IDs onto mesh vertices.
pub fn lift_annotations(
    mesh: &TriangleMesh,
    views: &[AnnotatedView],
    chain: &FrameChain,
    intr: &CameraIntrinsics,
    options: &LiftOptions,
) -> Result<LiftResult, AnnotateError> {
    let mut poses = Vec::with_capacity(views.len());
    for v in views {
        if (v.mask.width(), v.mask.height()) != (intr.width, intr.height) {
            return Err(AnnotateError::ResolutionMismatch { view: v.view, got: (v.mask.width(), v.mask.height()), expected: (intr.width, intr.height) });
        }
        poses.push(chain.mesh_to_camera(v.view)?);
    }
    let scene = MeshScene::new(mesh)?;
    let per_view: Vec<_> = views
        .par_iter()
        .zip(&poses)
        .map(|(v, pose)| view_votes(mesh, &scene, intr, pose, &v.mask, options.visibility_tolerance))
        .collect();
    let n = mesh.vertices().len();
    let mut tallies: Vec<BTreeMap<u16, u32>> = vec![BTreeMap::new(); n];
    let mut visible_in = vec![0u32; n];
    for (votes, visible) in &per_view {
        for &(i, id) in votes {
            *tallies[i as usize].entry(id).or_insert(0) += 1;
        }
        for (count, &vis) in visible_in.iter_mut().zip(visible) {
            *count += vis as u32;
        }
    }
    let mut labels = vec![0u16; n];
    let mut conflicts = Vec::new();
    for (i, tally) in tallies.iter().enumerate() {
        let Some(&best) = tally.values().max() else { continue };
        // ascending iteration: the first ID with the top count is the smallest
        let chosen = tally.iter().find(|(_, &c)| c == best).map(|(&l, _)| l).expect("nonempty tally");
        labels[i] = chosen;
        if tally.len() > 1 {
            conflicts.push(VertexConflict { vertex: i as u32, votes: tally.iter().map(|(&l, &c)| (l, c)).collect(), chosen });
        }
    }
    Ok(LiftResult { mesh: mesh.clone().with_labels(labels)?, conflicts, visible_in })
}

/// Voxelizes a labeled mesh; a triangle takes the smallest nonzero label of
/// its vertices.
pub fn build_ground_truth(mesh: &TriangleMesh, spec: &GridSpec) -> Result<GroundTruthVolume, AnnotateError> {
    Ok(voxelize_labeled_mesh(mesh, spec)?)
}

/// Renders the mesh's triangle labels as an annotation mask.
pub fn render_labels<S: RayCaster + ?Sized>(scene: &S, mesh: &TriangleMesh, intr: &CameraIntrinsics, mesh_to_camera: &RigidTransform) -> AnnotationImage {
    render_with(scene, intr, mesh_to_camera, 0u16, |_, hit| mesh.triangle_label(hit.triangle as usize))
}

/// Fraction of annotated pixels that show the same ID when the lifted labels
/// are rendered back, counting only pixels covered by the mesh.
pub fn reprojection_agreement(lifted: &TriangleMesh, mask: &AnnotationImage, intr: &CameraIntrinsics, mesh_to_camera: &RigidTransform) -> Result<f64, AnnotateError> {
    let scene = MeshScene::new(lifted)?;
    let covered: Raster<(bool, u16)> = render_with(&scene, intr, mesh_to_camera, (false, 0), |_, hit| (true, lifted.triangle_label(hit.triangle as usize)));
    let (mut total, mut agree) = (0usize, 0usize);
    for (&(hit, id), &want) in covered.data().iter().zip(mask.data()) {
        if hit && want != 0 {
            total += 1;
            agree += (id == want) as usize;
        }
    }
    Ok(if total == 0 { 1.0 } else { agree as f64 / total as f64 })
}
