//! Corpus plumbing shared by the stages: script-space normalization,
//! id-space encoding, deterministic splitting, and adapter group
//! resolution.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::corpus::subword::{Vocab, EOS};
use crate::corpus::synth::{language_tag, recover_oracle_target, unify_script};
use crate::corpus::types::{Corpus, LanguageSpec, Provenance};
use crate::distill::TrainSample;
use crate::error::{Error, Result};
use crate::rng::stream;

fn spec_by_id<'s>(specs: &'s [LanguageSpec]) -> BTreeMap<&'s str, &'s LanguageSpec> {
    specs.iter().map(|s| (s.id.as_str(), s)).collect()
}

/// Bring every pair into the unified, language-tagged script space. Pairs
/// already carrying their tag (distilled corpora store sources unified)
/// pass through unchanged, so the function is idempotent.
pub fn ensure_unified(corpus: &Corpus, specs: &[LanguageSpec]) -> Result<Corpus> {
    let by_id = spec_by_id(specs);
    let mut pairs = Vec::with_capacity(corpus.pairs.len());
    for pair in &corpus.pairs {
        let spec = by_id.get(pair.language.as_str()).copied().ok_or_else(|| {
            Error::Corpus(format!("no language spec for '{}'", pair.language))
        })?;
        if pair.source.first() == Some(&language_tag(&spec.id)) {
            pairs.push(pair.clone());
        } else {
            pairs.push(unify_script(pair, spec)?);
        }
    }
    Ok(Corpus { pairs })
}

/// Encode a unified corpus into id-space training samples. The source gets
/// its end-of-sequence terminator here, matching what the decoder-side
/// search builds at inference time; the target stays raw (the training
/// step adds begin/end markers).
pub fn encode_samples(unified: &Corpus, vocab_src: &Vocab, vocab_tgt: &Vocab) -> Vec<TrainSample> {
    unified
        .pairs
        .iter()
        .map(|p| {
            let mut src = vocab_src.encode_tokens(&p.source);
            src.push(EOS);
            TrainSample {
                language: p.language.clone(),
                src,
                target: vocab_tgt.encode_tokens(&p.target),
            }
        })
        .collect()
}

/// Deterministic per-language train/dev/test split. Dev and test targets
/// are replaced by the clean oracle targets recovered from their sources:
/// reference noise belongs to the training data story, while evaluation
/// sets play the role of a curated benchmark.
pub fn split_corpus(
    corpus: &Corpus,
    specs: &[LanguageSpec],
    dev_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<(Corpus, Corpus, Corpus)> {
    let by_id = spec_by_id(specs);
    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut test = Vec::new();
    for language in corpus.languages() {
        let spec = by_id.get(language.as_str()).copied().ok_or_else(|| {
            Error::Corpus(format!("no language spec for '{language}'"))
        })?;
        let mut indices: Vec<usize> = corpus
            .pairs
            .iter()
            .enumerate()
            .filter(|(_, p)| p.language == language)
            .map(|(i, _)| i)
            .collect();
        let n = indices.len();
        if n < 3 {
            return Err(Error::InvalidConfig(format!(
                "language '{language}' has {n} pairs; at least 3 are needed to split"
            )));
        }
        let n_dev = ((n as f64 * dev_fraction).round() as usize).max(1);
        let n_test = ((n as f64 * test_fraction).round() as usize).max(1);
        if n_dev + n_test >= n {
            return Err(Error::InvalidConfig(format!(
                "language '{language}': {n} pairs cannot hold {n_dev} dev + {n_test} test"
            )));
        }
        let mut rng = stream(seed, &format!("split/{language}"));
        indices.shuffle(&mut rng);
        let (dev_idx, rest) = indices.split_at(n_dev);
        let (test_idx, train_idx) = rest.split_at(n_test);

        let oracle_pair = |i: usize| -> Result<_> {
            let pair = &corpus.pairs[i];
            let mut clean = pair.clone();
            clean.target = recover_oracle_target(&pair.source, spec)?;
            clean.similarity = None;
            clean.provenance = Provenance::Original;
            Ok(clean)
        };
        let mut dev_idx = dev_idx.to_vec();
        let mut test_idx = test_idx.to_vec();
        let mut train_idx = train_idx.to_vec();
        dev_idx.sort_unstable();
        test_idx.sort_unstable();
        train_idx.sort_unstable();
        for i in dev_idx {
            dev.push(oracle_pair(i)?);
        }
        for i in test_idx {
            test.push(oracle_pair(i)?);
        }
        for i in train_idx {
            train.push(corpus.pairs[i].clone());
        }
    }
    Ok((Corpus { pairs: train }, Corpus { pairs: dev }, Corpus { pairs: test }))
}

/// Languages selected by an adapter group name: either one language id or
/// every language of a family.
pub fn resolve_group_languages(specs: &[LanguageSpec], group: &str) -> Result<Vec<String>> {
    if specs.iter().any(|s| s.id == group) {
        return Ok(vec![group.to_string()]);
    }
    let mut langs: Vec<String> =
        specs.iter().filter(|s| s.family == group).map(|s| s.id.clone()).collect();
    if langs.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "adapter group '{group}' names no language or family"
        )));
    }
    langs.sort();
    Ok(langs)
}

/// Restrict a corpus to a language subset, preserving order.
pub fn filter_languages(corpus: &Corpus, languages: &[String]) -> Corpus {
    Corpus {
        pairs: corpus
            .pairs
            .iter()
            .filter(|p| languages.contains(&p.language))
            .cloned()
            .collect(),
    }
}
