//! Multiview fusion: every pixel with a valid depth is lifted to 3D, dropped
//! into its voxel, and voxels keep the maximum score they receive. The
//! instance score is the maximum over the fused volume.

use rayon::prelude::*;

use crate::geometry::{CameraIntrinsics, FrameChain, GeometryError};
use crate::raster::{AnomalyMap2D, DepthMap, RasterError};
use crate::voxelgrid::{AnomalyVolume, GridSpec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FusionError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("anomaly map resolution {0}x{1} differs from intrinsics {2}x{3}")]
    IntrinsicsMismatch(u32, u32, u32, u32),
    #[error("non-finite anomaly score at pixel ({col}, {row})")]
    NonFiniteScore { col: u32, row: u32 },
    #[error("projections reference different grids")]
    SpecMismatch,
    #[error("{0} maps for {1} views")]
    ViewCount(usize, usize),
}

/// Scores of one view scattered into a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewProjection {
    pub spec: GridSpec,
    /// `(linear voxel index, score)`, one per in-grid valid pixel, in pixel order.
    pub entries: Vec<(usize, f32)>,
    /// Valid-depth pixels whose point fell outside the grid.
    pub dropped: usize,
}

/// Lifts every valid-depth pixel of `view` into the mesh frame
/// (`camera_to_mesh(view) ∘ unproject`) and records its voxel.
pub fn project_view(
    map: &AnomalyMap2D,
    depth: &DepthMap,
    intr: &CameraIntrinsics,
    chain: &FrameChain,
    view: usize,
    spec: &GridSpec,
) -> Result<ViewProjection, FusionError> {
    map.same_size(depth)?;
    if map.width() != intr.width || map.height() != intr.height {
        return Err(FusionError::IntrinsicsMismatch(map.width(), map.height(), intr.width, intr.height));
    }
    let to_mesh = chain.camera_to_mesh(view)?;
    let width = map.width() as usize;
    if let Some(i) = map.data().iter().position(|s| !s.is_finite()) {
        return Err(FusionError::NonFiniteScore { col: (i % width) as u32, row: (i / width) as u32 });
    }
    let mut entries = Vec::new();
    let mut dropped = 0;
    for (i, (&d, &score)) in depth.data().iter().zip(map.data()).enumerate() {
        if !(d > 0.0 && d.is_finite()) {
            continue;
        }
        let voxel = intr
            .unproject_pixel([(i % width) as f64, (i / width) as f64], d)
            .ok()
            .and_then(|p| spec.point_to_voxel(&to_mesh.apply(&p)));
        match voxel {
            Some(v) => entries.push((spec.linear(v), score)),
            None => dropped += 1,
        }
    }
    Ok(ViewProjection { spec: *spec, entries, dropped })
}

/// Voxel-wise max over all projections. The reduction is order-free, so the
/// result is bit-identical however rayon splits the work.
pub fn fuse_views(projections: &[ViewProjection], spec: &GridSpec) -> Result<AnomalyVolume, FusionError> {
    if projections.iter().any(|p| p.spec != *spec) {
        return Err(FusionError::SpecMismatch);
    }
    let fused = projections
        .par_iter()
        .fold(
            || AnomalyVolume::empty(*spec),
            |mut vol, p| {
                for &(i, s) in &p.entries {
                    vol.accumulate(i, s);
                }
                vol
            },
        )
        .reduce_with(|mut a, b| {
            a.merge_max(&b).expect("same spec");
            a
        });
    Ok(fused.unwrap_or_else(|| AnomalyVolume::empty(*spec)))
}

/// Projects and fuses all views of one instance; also returns the per-view
/// dropped-pixel counts.
pub fn fuse_instance(
    maps: &[AnomalyMap2D],
    depths: &[DepthMap],
    intr: &CameraIntrinsics,
    chain: &FrameChain,
    spec: &GridSpec,
) -> Result<(AnomalyVolume, Vec<usize>), FusionError> {
    if maps.len() != depths.len() || maps.len() != chain.view_count() {
        return Err(FusionError::ViewCount(maps.len(), chain.view_count()));
    }
    let projections = (0..maps.len())
        .into_par_iter()
        .map(|k| project_view(&maps[k], &depths[k], intr, chain, k, spec))
        .collect::<Result<Vec<_>, _>>()?;
    let dropped = projections.iter().map(|p| p.dropped).collect();
    Ok((fuse_views(&projections, spec)?, dropped))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalScore {
    pub score: f64,
    /// No voxel received a projection; `score` is then 0.
    pub empty: bool,
}

/// Maximum over touched voxels.
pub fn global_score(vol: &AnomalyVolume) -> GlobalScore {
    let max = vol.touched().iter_ones().map(|i| vol.scores()[i]).reduce(f32::max);
    match max {
        Some(s) => GlobalScore { score: s as f64, empty: false },
        None => {
            log::warn!("anomaly volume received no projections; global score set to 0");
            GlobalScore { score: 0.0, empty: true }
        }
    }
}
