//! Unsupervised representation learning from reliable sample relations.
//!
//! The pipeline alternates between
//! discovering compact groups of mutually close samples ([`grouping`]),
//! splitting them into subsets of mutually distant groups ([`partition`]),
//! regressing each subset onto a sampled target space ([`targets`], [`assign`], [`embednet`]),
//! and consolidating the per-subset networks with transitivity triplets ([`coupling`]).
//! [`pipeline`] orchestrates the loop; [`evalreport`] is the only place labels are read.

pub mod assign;
pub mod coupling;
pub mod dataset;
pub mod embednet;
pub mod error;
pub mod evalreport;
pub mod grouping;
pub mod neighbors;
pub mod partition;
pub mod pipeline;
pub mod targets;

mod seed;

pub use error::{Error, Result};
pub use seed::derive_seed;
