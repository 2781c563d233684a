//! Constrained deep adaptive clustering with cluster refinement.
//!
//! The engine discovers intent clusters from precomputed sentence (or token)
//! embeddings. Training runs in three stages:
//!
//! 1. a clustering layer maps embeddings to `k`-dimensional intent
//!    representations ([`clusternet`]);
//! 2. pairwise classification alternates a supervised pass on labeled pairs
//!    with a self-supervised pass on pairs selected by a pair of dynamic
//!    similarity thresholds ([`pairwise`]);
//! 3. cluster refinement sharpens Student-t soft assignments by minimizing
//!    the KL divergence to an auxiliary target distribution ([`refine`]).
//!
//! [`pipeline`] wires the stages into the method and its ablations, and
//! [`metrics`] scores the resulting partitions.

pub mod clusternet;
pub mod dataset;
pub mod encoder;
mod error;
pub mod format;
pub mod metrics;
pub mod pairwise;
pub mod pipeline;
pub mod refine;
mod rng;

pub use error::{Error, FormatError, Phase, Result};
pub use rng::seeded_rng;
