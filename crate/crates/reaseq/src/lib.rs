//! Desk-scale engine for knowledge-grounded sequential recommendation.
//!
//! The crate covers an offline pipeline end to end: a synthetic world with
//! planted ground truth, multi-agent knowledge extraction, text hashing into
//! item representations, residual-quantized semantic IDs, beyond-log gap
//! location, masked-diffusion behavior fill, a dual-pathway CTR ranker, and
//! the metrics that score each step. Everything is seeded and deterministic;
//! two runs with the same config and seed produce byte-identical artifacts.

pub mod agents;
pub mod baseline;
pub mod dllm;
pub mod embedding;
pub mod error;
pub mod locator;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod ranker;
pub mod rng;
pub mod tokenizer;
pub mod types;
pub mod worldgen;

pub use error::{Error, Result};
