//! Synthetic corpus generation: family ciphers, script offsets, reordering,
//! graded reference noise, and the script-unification preprocessing step.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::corpus::grammar::ToyGrammar;
use crate::corpus::score::similarity_score;
use crate::corpus::types::{
    validate_specs, Corpus, LanguageSpec, Provenance, SentencePair,
};
use crate::error::{Error, Result};

/// Per-family substitution cipher over lowercase letters. Vowels map to
/// vowels and consonants to consonants, so ciphered words keep their CV
/// shape. The cipher is a pure function of the family name — it does not
/// move when the corpus seed changes — and the reserved family name
/// `identity` gets the identity mapping.
#[derive(Debug, Clone)]
pub struct FamilyCipher {
    forward: [char; 26],
    backward: [char; 26],
}

const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];

impl FamilyCipher {
    pub fn for_family(family: &str) -> Self {
        let mut forward: [char; 26] = std::array::from_fn(|i| (b'a' + i as u8) as char);
        if family != "identity" {
            let mut rng = crate::rng::stream(0, &format!("family-cipher/{family}"));
            let mut vowels = VOWELS.to_vec();
            let mut consonants: Vec<char> =
                ('a'..='z').filter(|c| !VOWELS.contains(c)).collect();
            vowels.shuffle(&mut rng);
            consonants.shuffle(&mut rng);
            let mut vi = 0;
            let mut ci = 0;
            for (i, slot) in forward.iter_mut().enumerate() {
                let c = (b'a' + i as u8) as char;
                if VOWELS.contains(&c) {
                    *slot = vowels[vi];
                    vi += 1;
                } else {
                    *slot = consonants[ci];
                    ci += 1;
                }
            }
        }
        let mut backward = ['a'; 26];
        for (i, &c) in forward.iter().enumerate() {
            backward[(c as u8 - b'a') as usize] = (b'a' + i as u8) as char;
        }
        FamilyCipher { forward, backward }
    }

    pub fn encode_word(&self, word: &str) -> Result<String> {
        word.chars()
            .map(|c| {
                if c.is_ascii_lowercase() {
                    Ok(self.forward[(c as u8 - b'a') as usize])
                } else {
                    Err(Error::Corpus(format!("cipher input char '{c}' outside a-z")))
                }
            })
            .collect()
    }

    pub fn decode_word(&self, word: &str) -> Result<String> {
        word.chars()
            .map(|c| {
                if c.is_ascii_lowercase() {
                    Ok(self.backward[(c as u8 - b'a') as usize])
                } else {
                    Err(Error::Corpus(format!("cipher output char '{c}' outside a-z")))
                }
            })
            .collect()
    }
}

fn shift_word(word: &str, offset: u32) -> Result<String> {
    word.chars()
        .map(|c| {
            char::from_u32(c as u32 + offset)
                .ok_or_else(|| Error::Corpus(format!("script offset pushes '{c}' out of range")))
        })
        .collect()
}

fn unshift_word(word: &str, offset: u32, lang: &str) -> Result<String> {
    word.chars()
        .map(|c| {
            let u = c as u32;
            let lo = 'a' as u32 + offset;
            let hi = 'z' as u32 + offset;
            if u < lo || u > hi {
                return Err(Error::Corpus(format!(
                    "token char U+{u:04X} outside the script range of language '{lang}'"
                )));
            }
            Ok(char::from_u32(u - offset).expect("in-range by construction"))
        })
        .collect()
}

/// The language tag prepended to unified sources, marking which language a
/// sentence came from (the target side is always the shared toy "English").
pub fn language_tag(lang: &str) -> String {
    format!("<{lang}>")
}

/// Turn a clean target sentence into the language's native-script source:
/// cipher each word, apply the family word-order rule, then shift every
/// character by the script offset.
pub fn source_from_target(target: &[String], spec: &LanguageSpec) -> Result<Vec<String>> {
    let cipher = FamilyCipher::for_family(&spec.family);
    let ciphered: Vec<String> =
        target.iter().map(|w| cipher.encode_word(w)).collect::<Result<_>>()?;
    let reordered = spec.reorder_rule.apply(&ciphered);
    reordered.iter().map(|w| shift_word(w, spec.script_offset)).collect()
}

/// Invert `source_from_target`: recover the clean oracle target from a
/// native-script source. Every stage of the source construction is a
/// bijection, so the oracle survives file round trips that drop it.
pub fn recover_oracle_target(source: &[String], spec: &LanguageSpec) -> Result<Vec<String>> {
    let unshifted: Vec<String> = source
        .iter()
        .map(|w| unshift_word(w, spec.script_offset, &spec.id))
        .collect::<Result<_>>()?;
    let unordered = spec.reorder_rule.invert(&unshifted);
    let cipher = FamilyCipher::for_family(&spec.family);
    unordered.iter().map(|w| cipher.decode_word(w)).collect()
}

/// Corrupt a reference target in place. Severity is graded: the number of
/// edits is uniform in 1..=len/3, and with probability 0.3 the edit is a
/// truncation instead of token substitutions, so similarity scores spread
/// over a continuum instead of piling up at one value.
fn corrupt_target(target: &mut Vec<String>, grammar: &ToyGrammar, rng: &mut ChaCha12Rng) {
    let len = target.len();
    let max_edits = (len / 3).max(1);
    let edits = rng.gen_range(1..=max_edits);
    if rng.gen::<f64>() < 0.3 {
        let new_len = len.saturating_sub(edits).max(1);
        target.truncate(new_len);
    } else {
        let words = grammar.all_words();
        for _ in 0..edits {
            let pos = rng.gen_range(0..target.len());
            // Always substitute a *different* word so the edit is visible
            // to the similarity scorer.
            loop {
                let w = words[rng.gen_range(0..words.len())];
                if w != target[pos] {
                    target[pos] = w.to_string();
                    break;
                }
            }
        }
    }
}

/// Generate the full multilingual corpus: for each language, `pair_count`
/// pairs whose target comes from the toy grammar and whose source is the
/// clean target under the language's cipher + reorder + script offset.
/// A `noise_rate` fraction of targets is corrupted after the source is
/// built, mimicking misaligned references; each pair carries its token-F1
/// similarity against the clean oracle.
pub fn make_synthetic_corpus(specs: &[LanguageSpec], seed: u64) -> Result<Corpus> {
    validate_specs(specs)?;
    let grammar = ToyGrammar::standard();
    let mut pairs = Vec::new();
    for spec in specs {
        let mut rng = crate::rng::stream(seed, &format!("synth/{}", spec.id));
        for _ in 0..spec.pair_count {
            let oracle = grammar.sample(&mut rng);
            let source = source_from_target(&oracle, spec)?;
            let mut target = oracle.clone();
            if rng.gen::<f64>() < spec.noise_rate {
                corrupt_target(&mut target, &grammar, &mut rng);
            }
            let similarity = similarity_score(&target, &oracle);
            pairs.push(SentencePair {
                language: spec.id.clone(),
                source,
                target,
                similarity: Some(similarity),
                provenance: Provenance::Original,
            });
        }
    }
    Ok(Corpus { pairs })
}

/// Map a pair's source out of its native script into the shared space by
/// removing the script offset, and prepend the language tag. The target is
/// untouched.
pub fn unify_script(pair: &SentencePair, spec: &LanguageSpec) -> Result<SentencePair> {
    if pair.language != spec.id {
        return Err(Error::Corpus(format!(
            "pair language '{}' does not match spec '{}'",
            pair.language, spec.id
        )));
    }
    let mut source = vec![language_tag(&spec.id)];
    for w in &pair.source {
        source.push(unshift_word(w, spec.script_offset, &spec.id)?);
    }
    Ok(SentencePair { source, ..pair.clone() })
}

/// Re-apply a script offset to a unified source (without its language tag),
/// inverting `unify_script`.
pub fn reapply_offset(source: &[String], spec: &LanguageSpec) -> Result<Vec<String>> {
    source.iter().map(|w| shift_word(w, spec.script_offset)).collect()
}

fn spec_index<'s>(specs: &'s [LanguageSpec]) -> std::collections::BTreeMap<&'s str, &'s LanguageSpec> {
    specs.iter().map(|s| (s.id.as_str(), s)).collect()
}

fn spec_for<'s>(
    index: &std::collections::BTreeMap<&'s str, &'s LanguageSpec>,
    language: &str,
) -> Result<&'s LanguageSpec> {
    index
        .get(language)
        .copied()
        .ok_or_else(|| Error::Corpus(format!("no language spec for '{language}'")))
}

/// Unify every pair of a corpus against its language's spec.
pub fn unify_corpus(corpus: &Corpus, specs: &[LanguageSpec]) -> Result<Corpus> {
    let index = spec_index(specs);
    let mut pairs = Vec::with_capacity(corpus.pairs.len());
    for pair in &corpus.pairs {
        pairs.push(unify_script(pair, spec_for(&index, &pair.language)?)?);
    }
    Ok(Corpus { pairs })
}

/// Recompute each pair's similarity as the token F1 between its target and
/// the clean oracle target recovered from the source. Works on native and
/// unified (tagged) sources alike; every construction stage is bijective,
/// so the oracle survives any number of file round-trips.
pub fn rescore_against_oracle(corpus: &Corpus, specs: &[LanguageSpec]) -> Result<Corpus> {
    let index = spec_index(specs);
    let mut pairs = Vec::with_capacity(corpus.pairs.len());
    for pair in &corpus.pairs {
        let spec = spec_for(&index, &pair.language)?;
        let native: Vec<String> =
            if pair.source.first().is_some_and(|w| *w == language_tag(&spec.id)) {
                reapply_offset(&pair.source[1..], spec)?
            } else {
                pair.source.clone()
            };
        let oracle = recover_oracle_target(&native, spec)?;
        let similarity = similarity_score(&pair.target, &oracle);
        pairs.push(SentencePair { similarity: Some(similarity), ..pair.clone() });
    }
    Ok(Corpus { pairs })
}
