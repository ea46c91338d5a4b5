//! Explicit state-based 3D occupancy and scene-flow prediction.
//!
//! The pipeline lifts per-camera features into a voxel volume, refines it
//! through a multi-stage BEV cascade whose attention is reweighted by the
//! predicted occupied state, fuses sparse long/short-term history, and
//! evaluates predictions with ray-based metrics. Synthetic scenes provide
//! ground truth end to end.

pub mod decoder;
pub mod geometry;
pub mod grid;
pub mod grid_io;
pub mod lift_splat;
pub mod losses;
pub mod metrics;
pub mod mlp;
pub mod attention;
pub mod occupancy;
pub mod scenegen;
pub mod temporal;
