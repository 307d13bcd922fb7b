//! Evaluation: corpus BLEU-4 and chrF++, early stopping, decode-latency
//! benchmarking, and per-run report assembly.

pub mod bleu;
pub mod chrf;
pub mod latency;
pub mod report;
pub mod stopping;

pub use bleu::{corpus_bleu, BLEU_MAX_ORDER};
pub use chrf::{chrf_pp, CHRF_BETA, CHRF_CHAR_ORDER, CHRF_WORD_ORDER};
pub use latency::{
    benchmark_latency, environment_fingerprint, LatencyReport, DEFAULT_BENCH_BATCH,
    DEFAULT_BENCH_REPEATS,
};
pub use report::{EvalAverages, EvalReport, LanguageEval};
pub use stopping::{early_stop, DEFAULT_PATIENCE};
