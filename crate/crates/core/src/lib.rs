//! Performance similarity of computational kernels.
//!
//! Kernels are described by hardware-metric vectors (top-down pipeline
//! fractions on CPUs, cache transaction rates and instruction throughput on
//! GPUs). This crate turns per-run samples into standardized tables and
//! answers similarity questions over them: pairwise Euclidean distance,
//! Ward and k-means clustering, cluster quality and cluster-count
//! selection, nearest-kernel and family matching, and problem-size
//! stability.
//!
//! The usual pipeline:
//!
//! 1. [`dataset::parse_samples`], [`dataset::derive_gpu_rates`],
//!    [`dataset::aggregate_trials`], [`dataset::build_table`]
//! 2. [`preprocess::fit_transform`]
//! 3. [`cluster::agglomerative_ward`] / [`cluster::kmeans_fit`]
//! 4. [`quality::evaluate`], [`quality::select_k`]
//! 5. [`report::emit_report`]

pub mod cluster;
pub mod dataset;
pub mod error;
pub mod metricspace;
pub mod nonfinite;
pub mod preprocess;
pub mod quality;
pub mod report;
pub mod stability;

pub use error::{Error, Result};
