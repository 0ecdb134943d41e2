// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod geometry;
pub mod calibration;
pub mod meshops;
pub mod raster;
pub mod synthbench;
pub mod voxelgrid;
pub mod metrics;
pub mod fusion;
pub mod annotate;
pub mod io;
pub mod dataset;
