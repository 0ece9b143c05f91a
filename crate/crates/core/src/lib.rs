//! Utility-preserving private-attribute protection by stochastic data
//! substitution.
//!
//! The library trains a model that replaces each input sample with a sample
//! drawn from a fixed substitute pool, with substitution probabilities learned
//! so that private attributes become uninferable from the released sample
//! while useful attributes and general feature content survive. Alongside the
//! model it ships the evaluation protocol (probing attacks, normalized
//! accuracy gain) and exact information-theoretic diagnostics on small
//! enumerable instances.

// Index loops are the clearest form for the numeric kernels here, and
// validation uses `!(x > 0.0)` so NaN configuration values are rejected too.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adv;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod infer;
pub mod infotheory;
pub mod loss;
pub mod model;
pub mod rng;
pub mod runner;
pub mod stats;
pub mod train;

pub use error::{CoreError, Result};
