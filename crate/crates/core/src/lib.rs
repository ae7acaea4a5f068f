//! Future-fusion BEV dataset generation and a desk-scale Bayesian fusion model.
//!
//! The pipeline runs synthetic or recorded posed scans through registration
//! ([`dataset`]), per-cell attribution ([`raster`]) and into training pairs of
//! past-only inputs and whole-trajectory labels. [`fusion`] holds the
//! recurrent roll-out plus attention model with analytic gradients and
//! [`metrics`] the evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod geom;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod raster;
pub mod synth;

pub use error::{Error, Result};
pub use geom::{derive_local_frame, LocalFrame, Pose, Vec3};
pub use grid::{BevGrid, Channel, GridGeometry, Group, NUM_CHANNELS, PROXIMAL_BAND_M};
pub use io::{PointRecord, ScanFrame, SensorKind, TrajectoryManifest};
pub use raster::{rasterize, Accumulation, RasterPolicy, Strategy};

/// SplitMix64 finalizer.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
