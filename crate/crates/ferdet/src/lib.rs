//! A facial-expression detector built on selective state-space scans.
//!
//! The crate is organized bottom-up:
//! - [`tensor`] / [`graph`] / [`ops`]: a minimal dense tensor core with
//!   reverse-mode differentiation for the fixed operator set the network needs
//! - [`ssm`]: zero-order-hold discretization and the selective scan recurrence
//!   (sequential reference kernel, chunked parallel kernel, explicit backward)
//! - [`oss`]: the omnidirectional 8-direction scan over 2-D feature maps
//! - [`blocks`]: ABMLP attention, the FRM and OSS branches, and the dual-branch
//!   VSS modules
//! - [`network`]: backbone, feature-pyramid fusion, decoupled anchor-free head,
//!   box decoding and NMS, cost accounting, checkpoints
//! - [`metrics`]: IoU matching, precision/recall/F1, AP and mAP reporting
//! - [`data`] / [`train`]: synthetic corpus generation, dataset loading, the
//!   training loop, evaluation, and heatmap export

pub mod blocks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod oss;
pub mod params;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{FerError, Result};
pub use graph::{Graph, Var};
pub use tensor::{Scalar, Tensor};
