//! distillkit: a desk-scale knowledge-distillation toolkit for multilingual
//! translation models.
//!
//! The crate covers the full loop: synthesizing deterministic multilingual
//! corpora, training small transformer students against a larger teacher
//! with word-level, sequence-level, and selective distillation losses,
//! quality-filtered fine-tuning, adapter-based fine-tuning, and evaluation
//! with BLEU/chrF++ plus parameter and latency accounting. Everything is
//! plain f64 on the CPU and bitwise reproducible from a seed.

pub mod corpus;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod model;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};
