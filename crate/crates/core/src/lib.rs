// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse autoencoders on the concatenated head outputs of attention layers,
//! and the tools to read them: weight-based head attribution, direct feature
//! attribution by head and by source position, recursive attribution through
//! earlier layers, and causal checks by ablation and patching.
//!
//! The transformer is a small, hooked, pure-Rust implementation. Two
//! hand-built fixtures with known induction circuits make the analyses
//! checkable end to end.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod attribution;
pub mod container;
pub mod corpus;
pub mod error;
pub mod interface;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod sae;

pub use error::{Error, Result};

/// Version stamped into every JSON document the crate emits.
pub const SCHEMA_VERSION: u32 = 1;
