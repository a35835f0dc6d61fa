//! Clustered head attention for a toy decoder-only transformer.
//!
//! Heads whose attention scores agree are grouped per layer; only one
//! representative per group computes queries, keys and score rows, and only
//! its keys stay in the cache. The crate covers the dense kernels, the model,
//! both attention paths, K-means based calibration and online cluster
//! identification, and closed-form FLOP and cache-byte accounting.

pub mod accounting;
pub mod attention;
pub mod bench;
pub mod clustering;
pub mod engine;
pub mod error;
pub mod fixture;
pub mod model;
pub mod plan;
pub mod tensor;

pub use error::{ChaiError, Result};
