//! Corpus-level BLEU-4: geometric mean of clipped n-gram precisions for
//! orders 1 through 4, times the brevity penalty, scaled to [0, 100].
//!
//! No smoothing is applied: a zero match count at any order zeroes the
//! whole score. At corpus level the n-gram counts are pooled over all
//! sentence pairs before the precisions are formed, so single hard
//! sentences cannot zero a realistic test set the way they would under
//! sentence-level BLEU.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Highest n-gram order entering the geometric mean.
pub const BLEU_MAX_ORDER: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts: BTreeMap<&[String], usize> = BTreeMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU over parallel lists of tokenized sentences, in [0, 100].
/// Hypothesis `i` is scored against reference `i`; counts are pooled over
/// the whole corpus, so the score is invariant to pair order.
pub fn corpus_bleu(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Shape(format!(
            "corpus_bleu: {} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Corpus("corpus_bleu: no sentence pairs".into()));
    }

    let mut matches = [0u64; BLEU_MAX_ORDER];
    let mut totals = [0u64; BLEU_MAX_ORDER];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;

    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len() as u64;
        ref_len += reference.len() as u64;
        for n in 1..=BLEU_MAX_ORDER {
            let hyp_grams = ngram_counts(hyp, n);
            let ref_grams = ngram_counts(reference, n);
            for (gram, &count) in &hyp_grams {
                totals[n - 1] += count as u64;
                let clip = ref_grams.get(gram).copied().unwrap_or(0);
                matches[n - 1] += count.min(clip) as u64;
            }
        }
    }

    // Zero matches at any order (including "no n-grams at all") zeroes the
    // geometric mean.
    if matches.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_precision_sum: f64 = (0..BLEU_MAX_ORDER)
        .map(|i| (matches[i] as f64 / totals[i] as f64).ln())
        .sum();
    let brevity = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * brevity * (log_precision_sum / BLEU_MAX_ORDER as f64).exp())
}
