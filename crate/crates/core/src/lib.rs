//! Constrained dominant-sets clustering and retrieval re-ranking.
//!
//! Given embedding features for a set of items, [`affinity`] builds a
//! nonnegative pairwise graph, [`solver`] extracts the dominant set that is
//! forced to contain a chosen probe by running replicator dynamics on a
//! penalized payoff matrix, and [`rerank`] repeats that per probe, fuses the
//! memberships with external verification scores and produces rankings.
//! [`eval`] scores rankings with mAP and CMC under the single-query protocol.
//!
//! [`ds`] holds direct evaluations of the dominant-set definitions and
//! exhaustive oracles; they are exponential and meant for small graphs.
//!
//! ```
//! use cdsrank::affinity::AffinityMatrix;
//! use cdsrank::solver::{solve_cds, CdsConfig};
//!
//! let a = AffinityMatrix::from_rows(&[
//!     vec![0.0, 0.9, 0.1],
//!     vec![0.9, 0.0, 0.1],
//!     vec![0.1, 0.1, 0.0],
//! ])
//! .unwrap();
//! let r = solve_cds(&a, &[0], &CdsConfig::default()).unwrap();
//! assert!(r.support.contains(&0));
//! ```

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod affinity;
pub mod config;
pub mod dataset;
pub mod ds;
pub mod error;
pub mod eval;
pub mod io;
pub mod parallel;
pub mod pipeline;
pub mod rerank;
pub mod solver;

pub use error::{Error, Result};
