//! Learned static branch probabilities.
//!
//! The pipeline reads control-flow graphs in the `.bcfg` text format
//! ([`ir`]), computes per-branch structural features ([`analysis`],
//! [`features`]), turns profiled branch weights into a labeled dataset
//! ([`dataset`]), trains a multi-class gradient boosted tree ensemble
//! ([`gbdt`]) and exports it as flat arrays for fast inference ([`model`]).
//! [`baselines`] and [`eval`] measure the result against classic static
//! heuristics. [`synth`] generates random and rule-labeled inputs.

pub mod analysis;
pub mod baselines;
pub mod dataset;
pub mod eval;
pub mod features;
pub mod gbdt;
pub mod ir;
pub mod model;
pub mod synth;
