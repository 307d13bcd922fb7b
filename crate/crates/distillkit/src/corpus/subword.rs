//! BPE-style subword vocabularies with reserved specials and language tags.
//!
//! Vocabulary size is counted as alphabet + merges; the four reserved
//! specials and any language tags sit on top of that budget. Encoding uses
//! greedy longest-match segmentation over the learned token set, which is
//! deterministic and lossless on any text whose characters appear in the
//! training alphabet.

use std::collections::BTreeMap;

use crate::corpus::synth::{language_tag, unify_script};
use crate::corpus::types::{Corpus, LanguageSpec};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// End-of-word marker carried by the last character unit of every word.
pub const WORD_END: &str = "</w>";

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
    n_specials: usize,
}

impl Vocab {
    /// Build from language tags and learned subwords. Ids are assigned in
    /// order: pad, bos, eos, unk, tags, subwords.
    pub fn new(tags: &[String], subwords: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> =
            [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN].iter().map(|s| s.to_string()).collect();
        tokens.extend(tags.iter().cloned());
        let n_specials = tokens.len();
        tokens.extend(subwords);
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Corpus(format!("duplicate vocab token '{t}'")));
            }
        }
        Ok(Vocab { tokens, index, n_specials })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_specials(&self) -> usize {
        self.n_specials
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Segment one word into subword ids by greedy longest match over the
    /// unit sequence (chars, with the last char carrying the end-of-word
    /// marker). Characters outside the alphabet map to `UNK`.
    pub fn encode_word(&self, word: &str) -> Vec<usize> {
        if let Some(&id) = self.index.get(word) {
            if id < self.n_specials {
                return vec![id];
            }
        }
        let chars: Vec<char> = word.chars().collect();
        let n = chars.len();
        let unit = |i: usize| -> String {
            if i + 1 == n {
                format!("{}{}", chars[i], WORD_END)
            } else {
                chars[i].to_string()
            }
        };
        let mut ids = Vec::new();
        let mut i = 0;
        while i < n {
            let mut matched = None;
            let mut cand = String::new();
            for j in i..n {
                cand.push_str(&unit(j));
                if let Some(&id) = self.index.get(&cand) {
                    matched = Some((id, j + 1));
                }
            }
            match matched {
                Some((id, next)) => {
                    ids.push(id);
                    i = next;
                }
                None => {
                    ids.push(UNK);
                    i += 1;
                }
            }
        }
        ids
    }

    /// Encode a token sequence (words and/or tags) into a flat id sequence.
    pub fn encode_tokens(&self, words: &[String]) -> Vec<usize> {
        words.iter().flat_map(|w| self.encode_word(w)).collect()
    }

    /// Inverse of `encode_tokens` for in-alphabet text: stitch subwords back
    /// into words at end-of-word markers. Special ids become standalone
    /// tokens.
    pub fn decode_tokens(&self, ids: &[usize]) -> Vec<String> {
        let mut words = Vec::new();
        let mut buf = String::new();
        for &id in ids {
            if id < self.n_specials {
                if !buf.is_empty() {
                    words.push(std::mem::take(&mut buf));
                }
                words.push(self.tokens[id].clone());
                continue;
            }
            buf.push_str(&self.tokens[id]);
            if let Some(stripped) = buf.strip_suffix(WORD_END) {
                words.push(stripped.to_string());
                buf.clear();
            }
        }
        if !buf.is_empty() {
            words.push(buf);
        }
        words
    }
}

/// Greedy BPE training on a word-frequency table. `size` counts alphabet
/// units plus merges. Ties on pair frequency break lexicographically on the
/// (left, right) pair.
pub fn train_bpe(word_freqs: &BTreeMap<String, usize>, size: usize) -> Result<Vec<String>> {
    if word_freqs.is_empty() {
        return Err(Error::Corpus("cannot train a vocabulary on empty text".into()));
    }
    let mut words: Vec<(Vec<String>, usize)> = word_freqs
        .iter()
        .map(|(w, &f)| {
            let chars: Vec<char> = w.chars().collect();
            let units: Vec<String> = chars
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    if i + 1 == chars.len() {
                        format!("{c}{WORD_END}")
                    } else {
                        c.to_string()
                    }
                })
                .collect();
            (units, f)
        })
        .collect();

    let mut alphabet: Vec<String> =
        words.iter().flat_map(|(u, _)| u.iter().cloned()).collect();
    alphabet.sort();
    alphabet.dedup();
    if size < alphabet.len() {
        return Err(Error::Corpus(format!(
            "vocab size {size} is below the alphabet size {}",
            alphabet.len()
        )));
    }

    let mut vocab = alphabet.clone();
    let budget = size - alphabet.len();
    for _ in 0..budget {
        let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
        for (units, f) in &words {
            for w in units.windows(2) {
                *counts.entry((w[0].clone(), w[1].clone())).or_default() += f;
            }
        }
        // BTreeMap iterates in ascending key order, so keeping the first
        // strictly-greater count realizes the lexicographic tie-break.
        let Some((pair, _)) = counts
            .iter()
            .fold(None::<(&(String, String), usize)>, |best, (p, &c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((p, c)),
            })
        else {
            break; // every word is a single unit already
        };
        let merged = format!("{}{}", pair.0, pair.1);
        for (units, _) in &mut words {
            let mut out = Vec::with_capacity(units.len());
            let mut i = 0;
            while i < units.len() {
                if i + 1 < units.len() && units[i] == pair.0 && units[i + 1] == pair.1 {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(units[i].clone());
                    i += 1;
                }
            }
            *units = out;
        }
        vocab.push(merged);
    }
    Ok(vocab)
}

/// Train the source/target subword vocabularies for a corpus. Sources are
/// unified (script offset removed) before counting; the source vocabulary
/// carries one language tag per corpus language as extra specials, the
/// target vocabulary carries none.
pub fn train_subword_vocab(
    corpus: &Corpus,
    specs: &[LanguageSpec],
    size_src: usize,
    size_tgt: usize,
) -> Result<(Vocab, Vocab)> {
    if corpus.is_empty() {
        return Err(Error::Corpus("cannot train vocabularies on an empty corpus".into()));
    }
    let by_id: BTreeMap<&str, &LanguageSpec> =
        specs.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut src_freqs: BTreeMap<String, usize> = BTreeMap::new();
    let mut tgt_freqs: BTreeMap<String, usize> = BTreeMap::new();
    for p in &corpus.pairs {
        let spec = by_id.get(p.language.as_str()).ok_or_else(|| {
            Error::Corpus(format!("no language spec for corpus language '{}'", p.language))
        })?;
        let unified = unify_script(p, spec)?;
        for w in &unified.source[1..] {
            *src_freqs.entry(w.clone()).or_default() += 1;
        }
        for w in &p.target {
            *tgt_freqs.entry(w.clone()).or_default() += 1;
        }
    }
    let tags: Vec<String> = corpus.languages().iter().map(|l| language_tag(l)).collect();
    let src = Vocab::new(&tags, train_bpe(&src_freqs, size_src)?)?;
    let tgt = Vocab::new(&[], train_bpe(&tgt_freqs, size_tgt)?)?;
    Ok((src, tgt))
}
