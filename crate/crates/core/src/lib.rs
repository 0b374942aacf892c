//! Sparse cross-scale attention pipeline for LiDAR panoptic segmentation.
//!
//! The crate is organised bottom-up:
//!
//! * [`sparse`] — coordinate-indexed sparse tensors and their operators
//! * [`voxel`] — point clouds, voxelization and point/voxel maps
//! * [`attention`] — position encoding, kernelized attention, cross-scale stages
//! * [`heads`] — heatmap head, targets and the loss stack with analytic gradients
//! * [`inference`] — backbone, end-to-end forward pass and panoptic decoding
//! * [`metrics`] — PQ / SQ / RQ / mIoU evaluation
//! * [`io`], [`weights`], [`synth`], [`config`] — file formats, weights, synthetic scenes, configuration
//!
//! [`oracle`] holds dense brute-force reference implementations and [`check`]
//! runs them against the sparse operators.

pub mod attention;
pub mod check;
pub mod config;
pub mod error;
pub mod heads;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod oracle;
pub mod sparse;
pub mod synth;
pub mod voxel;
pub mod weights;

pub use error::{Result, ScanError, WeightFileError};
pub use voxel::{PointCloud, PointLabels};
