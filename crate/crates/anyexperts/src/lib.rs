//! Dynamic per-token expert allocation for Mixture-of-Experts layers.
//!
//! A desk-scale library implementing importance-driven routing: each token
//! gets a variable number of expert slots between `k_min` and `k_max`, filled
//! by real FFN experts or zero-cost identity ("virtual") experts, with the
//! virtual share capped. Includes static Top-K / Top-P baselines, the full
//! auxiliary-loss training objective, a synthetic-data training harness, and
//! checkpointing.

pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod harness;
pub mod importance;
pub mod moe;
pub mod numerics;
pub mod routing;

pub use error::{Error, Result};
