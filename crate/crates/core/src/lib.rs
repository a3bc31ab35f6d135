//! Two-stage causal clustering: cross-fitted residual-on-residual CATE
//! estimation with honest forests, extraction of a forest-derived similarity
//! kernel, and kernelized clustering for treatment-effect subgroup discovery.
//!
//! The pipeline has two steps. Step 1 ([`pipeline`]) partitions the data into
//! folds, estimates outcome and propensity nuisances out of fold, residualizes,
//! fits a causal forest per held-out fold, and extracts out-of-fold CATE
//! estimates together with a cross-fitted forest kernel. Step 2 ([`cluster`])
//! groups samples by treatment responsiveness, either by spectral clustering
//! of the kernel or by sum-of-norms convex clustering of the CATE estimates
//! with kernel-weighted fusion penalties.
//!
//! [`simgen`] provides the two synthetic designs used by the benchmark suite
//! ([`bench`]), and [`metrics`] the evaluation metrics (PEHE, excess risk,
//! within/between-cluster variance, RI/ARI/NMI).



pub mod cluster;
pub mod dataset;
pub mod error;
pub mod forest;
pub mod metrics;


pub mod numerics;
pub mod pipeline;

pub mod rng;
pub mod simgen;

pub use error::{Error, Result};
