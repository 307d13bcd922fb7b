//! chrF++: character n-gram (orders 1..=6) plus word n-gram (orders 1..=2)
//! F-scores with recall weighted twice as heavily as precision (beta = 2),
//! averaged over orders and scaled to [0, 100].
//!
//! Conventions, fixed here and relied on by the report format:
//! - whitespace never enters character n-grams: each string is stripped of
//!   all whitespace before character windows are taken, so character
//!   n-grams may straddle what used to be a word boundary;
//! - word n-grams come from whitespace splitting, with no further
//!   punctuation handling (inputs are space-joined token strings);
//! - corpus aggregation is micro: match/hypothesis/reference counts are
//!   pooled over all sentence pairs per order before any ratio is formed;
//! - an order with no n-grams on either side across the whole corpus is
//!   skipped, so short-string corpora are not punished for orders they
//!   cannot realize; an order present on one side only scores 0.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Highest character n-gram order.
pub const CHRF_CHAR_ORDER: usize = 6;
/// Highest word n-gram order (the "++" part).
pub const CHRF_WORD_ORDER: usize = 2;
/// Recall weight: F_beta with beta = 2.
pub const CHRF_BETA: f64 = 2.0;

/// Pooled counts for one n-gram order.
#[derive(Debug, Clone, Copy, Default)]
struct OrderTally {
    matches: u64,
    hyp_total: u64,
    ref_total: u64,
}

impl OrderTally {
    fn f_score(&self, beta: f64) -> Option<f64> {
        if self.hyp_total == 0 && self.ref_total == 0 {
            return None; // order unrealized on both sides: skipped
        }
        let precision =
            if self.hyp_total > 0 { self.matches as f64 / self.hyp_total as f64 } else { 0.0 };
        let recall =
            if self.ref_total > 0 { self.matches as f64 / self.ref_total as f64 } else { 0.0 };
        let denom = beta * beta * precision + recall;
        if denom == 0.0 {
            return Some(0.0);
        }
        Some((1.0 + beta * beta) * precision * recall / denom)
    }
}

fn count_grams<T: Ord + Clone>(units: &[T], n: usize) -> BTreeMap<Vec<T>, usize> {
    let mut counts = BTreeMap::new();
    if units.len() >= n {
        for gram in units.windows(n) {
            *counts.entry(gram.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

fn tally_pair<T: Ord + Clone>(tally: &mut OrderTally, hyp: &[T], reference: &[T], n: usize) {
    let hyp_grams = count_grams(hyp, n);
    let ref_grams = count_grams(reference, n);
    for (gram, &count) in &hyp_grams {
        tally.hyp_total += count as u64;
        let clip = ref_grams.get(gram).copied().unwrap_or(0);
        tally.matches += count.min(clip) as u64;
    }
    for &count in ref_grams.values() {
        tally.ref_total += count as u64;
    }
}

/// chrF++ over parallel lists of detokenized strings, in [0, 100].
pub fn chrf_pp(hypotheses: &[String], references: &[String]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Shape(format!(
            "chrf_pp: {} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Corpus("chrf_pp: no sentence pairs".into()));
    }

    let mut char_tallies = [OrderTally::default(); CHRF_CHAR_ORDER];
    let mut word_tallies = [OrderTally::default(); CHRF_WORD_ORDER];

    for (i, (hyp, reference)) in hypotheses.iter().zip(references).enumerate() {
        let ref_chars: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
        if ref_chars.is_empty() {
            return Err(Error::Corpus(format!("chrf_pp: reference {i} is empty")));
        }
        let hyp_chars: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
        for n in 1..=CHRF_CHAR_ORDER {
            tally_pair(&mut char_tallies[n - 1], &hyp_chars, &ref_chars, n);
        }
        let hyp_words: Vec<&str> = hyp.split_whitespace().collect();
        let ref_words: Vec<&str> = reference.split_whitespace().collect();
        for n in 1..=CHRF_WORD_ORDER {
            tally_pair(&mut word_tallies[n - 1], &hyp_words, &ref_words, n);
        }
    }

    let mut sum = 0.0;
    let mut live_orders = 0usize;
    for tally in char_tallies.iter().chain(&word_tallies) {
        if let Some(f) = tally.f_score(CHRF_BETA) {
            sum += f;
            live_orders += 1;
        }
    }
    // References are non-empty, so at least the character unigram order
    // is always live.
    Ok(100.0 * sum / live_orders as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strs(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn identical_strings_score_100() {
        let refs = strs(&["ab cd", "hello there", "x"]);
        let score = chrf_pp(&refs, &refs).unwrap();
        assert!((score - 100.0).abs() < 1e-9, "got {score}");
    }

    #[test]
    fn disjoint_character_sets_score_zero() {
        let hyps = strs(&["abc ab"]);
        let refs = strs(&["xyz xy"]);
        assert_eq!(chrf_pp(&hyps, &refs).unwrap(), 0.0);
    }

    #[test]
    fn two_word_pair_matches_hand_computation() {
        // hyp "ab cd" vs ref "ab ce". Stripped characters: abcd vs abce.
        // char 1: 3 of 4 both sides -> P = R = 3/4 -> F = 3/4
        // char 2: {ab,bc,cd} vs {ab,bc,ce} -> 2 of 3 -> F = 2/3
        // char 3: {abc,bcd} vs {abc,bce} -> 1 of 2 -> F = 1/2
        // char 4: no match -> F = 0; char 5,6: empty both sides -> skipped
        // word 1: {ab,cd} vs {ab,ce} -> 1 of 2 -> F = 1/2
        // word 2: one bigram each, no match -> F = 0
        let got = chrf_pp(&strs(&["ab cd"]), &strs(&["ab ce"])).unwrap();
        let want = 100.0 * (0.75 + 2.0 / 3.0 + 0.5 + 0.0 + 0.5 + 0.0) / 6.0;
        assert!((got - want).abs() < 1e-9, "got {got} want {want}");
    }

    #[test]
    fn whitespace_excluded_from_character_grams() {
        // "a b" and "ab" carry identical character n-grams once whitespace
        // is stripped (both reduce to the sequence a,b), so the two char
        // orders score 1; the word orders disagree entirely and score 0.
        let got = chrf_pp(&strs(&["a b"]), &strs(&["ab"])).unwrap();
        assert!((got - 50.0).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn aggregation_is_micro_not_per_sentence() {
        // Pair 1 is perfect, pair 2 shares nothing. Pooling counts before
        // forming ratios gives char-1 F of 2/3 (2 matches over 3 on each
        // side), char-2 F of 1, word-1 F of 1/2; a per-sentence average
        // would give 50 instead.
        let hyps = strs(&["aa", "b"]);
        let refs = strs(&["aa", "c"]);
        let got = chrf_pp(&hyps, &refs).unwrap();
        let want = 100.0 * (2.0 / 3.0 + 1.0 + 0.5) / 3.0;
        assert!((got - want).abs() < 1e-9, "got {got} want {want}");
    }

    #[test]
    fn recall_weighting_is_asymmetric() {
        // A hypothesis that over-generates is punished less than one that
        // under-generates, because recall carries beta^2 = 4x the weight.
        let over = chrf_pp(&strs(&["abcd"]), &strs(&["ab"])).unwrap();
        let under = chrf_pp(&strs(&["ab"]), &strs(&["abcd"])).unwrap();
        assert!(over > under, "over {over} <= under {under}");
    }

    #[test]
    fn empty_reference_rejected() {
        assert!(chrf_pp(&strs(&["ab"]), &strs(&[""])).is_err());
        // Whitespace-only references are empty after stripping.
        assert!(chrf_pp(&strs(&["ab"]), &strs(&["   "])).is_err());
        // Empty hypotheses are fine; they simply score 0 everywhere.
        let got = chrf_pp(&strs(&[""]), &strs(&["ab"])).unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn mismatched_counts_rejected() {
        assert!(chrf_pp(&strs(&["a"]), &strs(&["a", "b"])).is_err());
        assert!(chrf_pp(&[], &[]).is_err());
    }
}
