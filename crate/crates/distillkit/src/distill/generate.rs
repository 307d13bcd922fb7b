//! Teacher-side corpus generation: replace every target with the
//! teacher's beam-decoded hypothesis (hard pseudo-labels).

use crate::corpus::subword::Vocab;
use crate::corpus::types::{Corpus, Provenance, SentencePair};
use crate::error::{Error, Result};
use crate::model::params::Model;

/// Decode budget for one source: twice the source length plus slack,
/// capped by the model's position table (the decoder input carries a
/// leading begin-of-sequence token).
pub fn decode_budget(model: &Model, src_len: usize) -> usize {
    (2 * src_len + 8).min(model.cfg.max_positions.saturating_sub(1))
}

/// A distilled corpus plus one log line per dropped pair.
pub struct DistillOutcome {
    pub corpus: Corpus,
    pub dropped: Vec<String>,
}

/// Re-translate `corpus` with the teacher. Sources must already be in the
/// unified, language-tagged form the teacher was trained on. Targets are
/// replaced by the beam hypothesis; provenance becomes `distilled`;
/// similarity is cleared (rescore against the oracle separately). Pairs
/// whose decode fails — an error, no completed hypothesis within budget,
/// or an empty translation — are dropped and reported, never kept.
pub fn distill_corpus(
    teacher: &Model,
    corpus: &Corpus,
    vocab_src: &Vocab,
    vocab_tgt: &Vocab,
    beam: usize,
) -> Result<DistillOutcome> {
    if beam == 0 {
        return Err(Error::InvalidConfig("beam size must be at least 1".into()));
    }
    let mut pairs = Vec::with_capacity(corpus.pairs.len());
    let mut dropped = Vec::new();
    for (i, pair) in corpus.pairs.iter().enumerate() {
        let src_ids = vocab_src.encode_tokens(&pair.source);
        if src_ids.first().is_none_or(|&t| t >= vocab_src.n_specials()) {
            dropped.push(format!(
                "pair {i} ({}): source is not language-tagged; run script unification first",
                pair.language
            ));
            continue;
        }
        let max_len = decode_budget(teacher, src_ids.len());
        match teacher.decode_beam(&src_ids, None, beam, max_len, 1.0) {
            Ok(hyp) if hyp.completed => {
                let mut ids = hyp.tokens;
                ids.pop(); // trailing end-of-sequence
                let target = vocab_tgt.decode_tokens(&ids);
                if target.is_empty() {
                    dropped.push(format!(
                        "pair {i} ({}): teacher produced an empty translation",
                        pair.language
                    ));
                    continue;
                }
                pairs.push(SentencePair {
                    language: pair.language.clone(),
                    source: pair.source.clone(),
                    target,
                    similarity: None,
                    provenance: Provenance::Distilled,
                });
            }
            Ok(_) => dropped.push(format!(
                "pair {i} ({}): no completed hypothesis within {max_len} tokens",
                pair.language
            )),
            Err(e) => dropped.push(format!("pair {i} ({}): decode failed: {e}", pair.language)),
        }
    }
    Ok(DistillOutcome { corpus: Corpus { pairs }, dropped })
}
