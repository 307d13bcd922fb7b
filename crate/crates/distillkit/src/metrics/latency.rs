//! Decode-latency benchmarking: per-language median wall-clock seconds
//! over repeated timed passes, after one untimed warm-up pass.
//!
//! Decoding runs on the single worker, sentence by sentence, so the batch
//! size only sets the work-chunk granularity and is recorded as a
//! measurement condition rather than a throughput lever. Timings cover
//! decoding only; tokenization happens once up front. These numbers are
//! inherently machine-dependent, which is why the report carries an
//! environment fingerprint and why benchmark outputs are exempt from
//! byte-identity expectations that apply to every other artifact.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::subword::Vocab;
use crate::corpus::types::Corpus;
use crate::distill::decode_budget;
use crate::error::{Error, Result};
use crate::model::Model;

/// Sentence-count chunking used when none is configured.
pub const DEFAULT_BENCH_BATCH: usize = 64;
/// Timed passes entering the median when none is configured.
pub const DEFAULT_BENCH_REPEATS: usize = 5;

/// Median decode seconds per language plus the conditions they were
/// measured under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub per_language: BTreeMap<String, f64>,
    pub batch_size: usize,
    pub repeats: usize,
    pub environment: String,
}

/// Coarse fingerprint of the measurement environment.
pub fn environment_fingerprint() -> String {
    format!("{}-{} single-worker", std::env::consts::OS, std::env::consts::ARCH)
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("wall-clock times are finite"));
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Time greedy decoding of every source in `testset`, grouped by language.
/// Sources must already be language-tagged (unified script space). Each
/// language gets one warm-up pass, then `repeats` timed passes; the median
/// is reported.
pub fn benchmark_latency(
    model: &Model,
    testset: &Corpus,
    vocab_src: &Vocab,
    batch_size: usize,
    repeats: usize,
) -> Result<LatencyReport> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("bench batch_size must be at least 1".into()));
    }
    if repeats == 0 {
        return Err(Error::InvalidConfig("bench repeats must be at least 1".into()));
    }

    let mut per_language = BTreeMap::new();
    for language in testset.languages() {
        let sources: Vec<Vec<usize>> = testset
            .by_language(&language)
            .iter()
            .map(|p| vocab_src.encode_tokens(&p.source))
            .collect();
        for src in &sources {
            if src.first().is_none_or(|&t| t >= vocab_src.n_specials()) {
                return Err(Error::Precondition(format!(
                    "bench testset for '{language}' is not language-tagged; run script \
                     unification first"
                )));
            }
        }

        let decode_pass = |m: &Model| -> Result<()> {
            for chunk in sources.chunks(batch_size) {
                for src in chunk {
                    let max_len = decode_budget(m, src.len());
                    m.decode_greedy(src, None, max_len, 1.0)?;
                }
            }
            Ok(())
        };

        decode_pass(model)?; // warm-up, excluded from the timings
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            decode_pass(model)?;
            samples.push(start.elapsed().as_secs_f64());
        }
        per_language.insert(language, median(&mut samples));
    }

    Ok(LatencyReport {
        per_language,
        batch_size,
        repeats,
        environment: environment_fingerprint(),
    })
}
