//! Fine-grained structured pruning for small DNNs.
//!
//! The crate covers the full path from a dense model to a pruned, packed and
//! executed one:
//!
//! * [`graph`], [`optim`], [`train`]: a small dense tensor engine with
//!   analytic gradients.
//! * [`pruning`]: block partitions and mask projection for every pruning
//!   regularity (unstructured, structured, pattern, block-based, block-punched).
//! * [`reweight`]: reweighted group-lasso training and hardening.
//! * [`bcs`]: Blocked Compressed Storage.
//! * [`executor`]: threaded BCS kernels, row reordering, fusion and GA tuning.
//! * [`latency`]: offline latency tables.
//! * [`mapper`]: rule-based and policy-gradient pruning-scheme mapping.
//! * [`io`], [`config`], [`report`]: model archives, run configuration and
//!   per-layer reports.

pub mod bcs;
pub mod config;
pub mod dataset;
pub mod error;
pub mod executor;
pub mod graph;
pub mod io;
pub mod latency;
pub mod mapper;
pub mod mask;
pub mod models;
pub mod optim;
pub mod pruning;
pub mod report;
pub mod reweight;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{GraphBuilder, Layer, LayerKind, Params, TensorGraph};
pub use mask::{Mask, MaskSet};
pub use tensor::{Scalar, Tensor};

/// Version string embedded in every written artifact.
pub const TOOL_VERSION: &str = concat!("blockprune ", env!("CARGO_PKG_VERSION"));
