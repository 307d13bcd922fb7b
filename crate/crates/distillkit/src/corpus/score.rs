//! Similarity scoring and the per-language mu + k*sigma high-quality filter.

use std::collections::BTreeMap;

use crate::corpus::types::{Corpus, FilterPolicy, Provenance};
use crate::error::{Error, Result};

/// Token-multiset F1 between a hypothesis and a reference, in [0, 1].
/// This is the deterministic stand-in for an embedding-based sentence
/// similarity: 1 exactly when the token multisets agree, monotone in the
/// number of token edits, and symmetric in its arguments.
pub fn similarity_score(hyp: &[String], reference: &[String]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for w in hyp {
        counts.entry(w.as_str()).or_default().0 += 1;
    }
    for w in reference {
        counts.entry(w.as_str()).or_default().1 += 1;
    }
    let matches: usize = counts.values().map(|&(h, r)| h.min(r)).sum();
    2.0 * matches as f64 / (hyp.len() + reference.len()) as f64
}

/// Per-language mean and population standard deviation of similarity
/// scores. Errors if any pair is unscored.
pub fn corpus_quality_stats(corpus: &Corpus) -> Result<BTreeMap<String, (f64, f64)>> {
    let mut grouped: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for p in &corpus.pairs {
        let s = p
            .similarity
            .ok_or_else(|| Error::Corpus(format!("unscored pair in language '{}'", p.language)))?;
        grouped.entry(p.language.clone()).or_default().push(s);
    }
    Ok(grouped
        .into_iter()
        .map(|(lang, scores)| {
            let n = scores.len() as f64;
            let mean = scores.iter().sum::<f64>() / n;
            let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
            (lang, (mean, var.sqrt()))
        })
        .collect())
}

/// Result of the high-quality filter: the retained subset, the k actually
/// used per language, and any languages that ended up empty.
#[derive(Debug, Clone)]
pub struct HqFilterOutcome {
    pub corpus: Corpus,
    pub realized_k: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

struct LangScores {
    /// (index into corpus.pairs, score)
    entries: Vec<(usize, f64)>,
    mean: f64,
    std: f64,
}

fn group_scores(corpus: &Corpus) -> Result<BTreeMap<String, LangScores>> {
    let mut grouped: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for (i, p) in corpus.pairs.iter().enumerate() {
        let s = p
            .similarity
            .ok_or_else(|| Error::Corpus(format!("unscored pair in language '{}'", p.language)))?;
        grouped.entry(p.language.clone()).or_default().push((i, s));
    }
    Ok(grouped
        .into_iter()
        .map(|(lang, entries)| {
            let n = entries.len() as f64;
            let mean = entries.iter().map(|e| e.1).sum::<f64>() / n;
            let var = entries.iter().map(|e| (e.1 - mean) * (e.1 - mean)).sum::<f64>() / n;
            (lang, LangScores { entries, mean, std: var.sqrt() })
        })
        .collect())
}

/// Distinct scores in descending order with the cumulative count kept at
/// each threshold step ("keep everything >= this score").
fn descending_steps(entries: &[(usize, f64)]) -> Vec<(f64, usize)> {
    let mut scores: Vec<f64> = entries.iter().map(|e| e.1).collect();
    scores.sort_by(|a, b| b.partial_cmp(a).expect("scores are finite"));
    let mut steps = Vec::new();
    let mut kept = 0usize;
    let mut i = 0usize;
    while i < scores.len() {
        let s = scores[i];
        while i < scores.len() && scores[i] == s {
            kept += 1;
            i += 1;
        }
        steps.push((s, kept));
    }
    steps
}

/// Threshold that keeps exactly the top `steps[j]` scores: the midpoint to
/// the next distinct score below, or just under the minimum when keeping
/// everything.
fn threshold_below(steps: &[(f64, usize)], j: usize) -> f64 {
    if j + 1 < steps.len() {
        0.5 * (steps[j].0 + steps[j + 1].0)
    } else {
        steps[j].0 - 1e-9
    }
}

/// Pick the feasible kept-count closest to the target fraction; ties prefer
/// keeping more data.
fn best_step(steps: &[(f64, usize)], n: usize, target: f64) -> Option<usize> {
    let mut best: Option<(f64, usize, usize)> = None; // (distance, kept, j)
    // j = steps.len() encodes "keep nothing".
    for j in 0..=steps.len() {
        let kept = if j == steps.len() { 0 } else { steps[j].1 };
        let d = (kept as f64 / n as f64 - target).abs();
        let better = match &best {
            None => true,
            Some((bd, bk, _)) => d < *bd - 1e-15 || ((d - *bd).abs() <= 1e-15 && kept > *bk),
        };
        if better {
            best = Some((d, kept, j));
        }
    }
    best.map(|(_, kept, j)| if kept == 0 { steps.len() } else { j })
}

/// Keep, per language, the pairs whose similarity exceeds mu_L + k_L *
/// sigma_L. k_L comes from the policy when given explicitly; otherwise it
/// is searched so the language retains about `target_fraction` (or, with
/// `global_k`, one shared k is searched against the overall fraction).
/// Degenerate languages with sigma = 0 fall back to keeping the top
/// ceil(fraction * n) pairs by score, breaking ties by original position.
/// Retained pairs get `hq` provenance. Languages that end up empty are
/// dropped with a warning.
pub fn hq_filter(corpus: &Corpus, policy: &FilterPolicy) -> Result<HqFilterOutcome> {
    policy.validate()?;
    if corpus.is_empty() {
        return Err(Error::Corpus("cannot filter an empty corpus".into()));
    }
    let grouped = group_scores(corpus)?;
    let mut realized_k: BTreeMap<String, f64> = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut selected = vec![false; corpus.pairs.len()];

    // Shared-k search over languages that have spread and no explicit k.
    let global_k = if policy.global_k {
        let mut candidates: Vec<f64> = Vec::new();
        let mut total = 0usize;
        for (lang, ls) in &grouped {
            if ls.std == 0.0 || policy.k_per_language.contains_key(lang) {
                continue;
            }
            total += ls.entries.len();
            for &(_, s) in &ls.entries {
                candidates.push((s - ls.mean) / ls.std);
            }
        }
        if total == 0 {
            None
        } else {
            candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            candidates.dedup();
            // Evaluate midpoints between adjacent candidate k values plus
            // sentinels on both sides.
            let mut probes = vec![candidates[0] - 1.0];
            probes.extend(candidates.windows(2).map(|w| 0.5 * (w[0] + w[1])));
            probes.push(candidates[candidates.len() - 1] + 1.0);
            let mut best: Option<(f64, usize, f64)> = None; // (distance, kept, k)
            for &k in &probes {
                let kept: usize = grouped
                    .iter()
                    .filter(|(lang, ls)| {
                        ls.std > 0.0 && !policy.k_per_language.contains_key(*lang)
                    })
                    .map(|(_, ls)| {
                        let t = ls.mean + k * ls.std;
                        ls.entries.iter().filter(|e| e.1 > t).count()
                    })
                    .sum();
                let d = (kept as f64 / total as f64 - policy.target_fraction).abs();
                let better = match &best {
                    None => true,
                    Some((bd, bk, _)) => d < *bd - 1e-15 || ((d - *bd).abs() <= 1e-15 && kept > *bk),
                };
                if better {
                    best = Some((d, kept, k));
                }
            }
            best.map(|(_, _, k)| k)
        }
    } else {
        None
    };

    for (lang, ls) in &grouped {
        let n = ls.entries.len();
        let explicit = policy.k_per_language.get(lang).copied();
        if let Some(k) = explicit {
            let t = ls.mean + k * ls.std;
            for &(i, s) in &ls.entries {
                if s > t {
                    selected[i] = true;
                }
            }
            realized_k.insert(lang.clone(), k);
        } else if ls.std == 0.0 {
            // All scores identical: the threshold form cannot separate
            // anything, so keep the first ceil(fraction * n) by position.
            let m = (policy.target_fraction * n as f64).ceil() as usize;
            for &(i, _) in ls.entries.iter().take(m) {
                selected[i] = true;
            }
            realized_k.insert(lang.clone(), 0.0);
        } else if let Some(k) = global_k {
            let t = ls.mean + k * ls.std;
            for &(i, s) in &ls.entries {
                if s > t {
                    selected[i] = true;
                }
            }
            realized_k.insert(lang.clone(), k);
        } else {
            let steps = descending_steps(&ls.entries);
            let j = best_step(&steps, n, policy.target_fraction).expect("non-empty steps");
            let t = if j == steps.len() {
                // Keep nothing: any threshold at or above the max works.
                steps[0].0
            } else {
                threshold_below(&steps, j)
            };
            for &(i, s) in &ls.entries {
                if s > t {
                    selected[i] = true;
                }
            }
            realized_k.insert(lang.clone(), (t - ls.mean) / ls.std);
        }
        let kept = ls.entries.iter().filter(|e| selected[e.0]).count();
        if kept == 0 {
            warnings.push(format!("language '{lang}' retained no pairs and is excluded"));
            realized_k.remove(lang);
        }
    }

    let pairs = corpus
        .pairs
        .iter()
        .enumerate()
        .filter(|(i, _)| selected[*i])
        .map(|(_, p)| {
            let mut p = p.clone();
            p.provenance = Provenance::Hq;
            p
        })
        .collect();
    Ok(HqFilterOutcome { corpus: Corpus { pairs }, realized_k, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::types::SentencePair;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn scored_pair(lang: &str, score: f64) -> SentencePair {
        SentencePair {
            language: lang.into(),
            source: toks(&["x"]),
            target: toks(&["y"]),
            similarity: Some(score),
            provenance: Provenance::Original,
        }
    }

    #[test]
    fn identical_sequences_score_one() {
        let a = toks(&["m", "n", "o"]);
        assert_eq!(similarity_score(&a, &a), 1.0);
    }

    #[test]
    fn disjoint_sequences_score_zero() {
        assert_eq!(similarity_score(&toks(&["a", "b"]), &toks(&["c", "d"])), 0.0);
    }

    #[test]
    fn f1_hand_computation() {
        // hyp 3 tokens sharing 2 with a 4-token ref:
        // F1 = 2*(2/3)*(2/4) / ((2/3)+(2/4)) = 4/7
        let hyp = toks(&["a", "b", "x"]);
        let reference = toks(&["a", "b", "c", "d"]);
        let s = similarity_score(&hyp, &reference);
        assert!((s - 4.0 / 7.0).abs() < 1e-12);
        assert!((s - 0.571).abs() < 1e-3);
    }

    #[test]
    fn empty_hypothesis_scores_zero() {
        assert_eq!(similarity_score(&[], &toks(&["a"])), 0.0);
    }

    #[test]
    fn score_is_symmetric_and_tight() {
        let a = toks(&["p", "q", "q", "r"]);
        let b = toks(&["q", "p", "s"]);
        assert_eq!(similarity_score(&a, &b), similarity_score(&b, &a));
        // Multiset equality is required for a perfect score.
        let c = toks(&["p", "q", "q"]);
        let d = toks(&["p", "p", "q"]);
        assert!(similarity_score(&c, &d) < 1.0);
        let e = toks(&["q", "p", "q"]);
        assert_eq!(similarity_score(&c, &e), 1.0);
    }

    #[test]
    fn stats_basics() {
        let corpus = Corpus {
            pairs: vec![scored_pair("aa", 0.0), scored_pair("aa", 1.0), scored_pair("bb", 0.4)],
        };
        let stats = corpus_quality_stats(&corpus).unwrap();
        assert_eq!(stats["aa"], (0.5, 0.5));
        assert_eq!(stats["bb"], (0.4, 0.0));
    }

    #[test]
    fn stats_reject_unscored() {
        let mut p = scored_pair("aa", 0.5);
        p.similarity = None;
        let corpus = Corpus { pairs: vec![p] };
        assert!(corpus_quality_stats(&corpus).is_err());
    }

    #[test]
    fn explicit_k_matches_hand_example() {
        // scores [0.9, 0.8, 0.7, 0.6, 0.5], k = 1:
        // mu = 0.7, sigma = sqrt(0.02) ~ 0.1414, threshold ~ 0.8414,
        // so exactly {0.9} survives (20%).
        let corpus = Corpus {
            pairs: [0.9, 0.8, 0.7, 0.6, 0.5].iter().map(|&s| scored_pair("aa", s)).collect(),
        };
        let mut policy = FilterPolicy::default();
        policy.k_per_language.insert("aa".into(), 1.0);
        let out = hq_filter(&corpus, &policy).unwrap();
        assert_eq!(out.corpus.len(), 1);
        assert_eq!(out.corpus.pairs[0].similarity, Some(0.9));
        assert_eq!(out.corpus.pairs[0].provenance, Provenance::Hq);
        assert_eq!(out.realized_k["aa"], 1.0);
    }

    #[test]
    fn searched_k_hits_target_on_spread_scores() {
        let corpus = Corpus {
            pairs: [0.9, 0.8, 0.7, 0.6, 0.5].iter().map(|&s| scored_pair("aa", s)).collect(),
        };
        let out = hq_filter(&corpus, &FilterPolicy::default()).unwrap();
        assert_eq!(out.corpus.len(), 1);
        assert_eq!(out.corpus.pairs[0].similarity, Some(0.9));
        // Realized k must reproduce the same selection when applied as a
        // threshold.
        let k = out.realized_k["aa"];
        let t = 0.7 + k * (0.02f64).sqrt();
        assert!(0.8 < t && t < 0.9);
    }

    #[test]
    fn degenerate_scores_fall_back_to_top_fraction() {
        let corpus = Corpus { pairs: (0..10).map(|_| scored_pair("aa", 0.75)).collect() };
        let out = hq_filter(&corpus, &FilterPolicy::default()).unwrap();
        assert_eq!(out.corpus.len(), 2); // ceil(0.2 * 10)
        assert_eq!(out.realized_k["aa"], 0.0);
    }

    #[test]
    fn filter_output_is_subset_with_hq_provenance() {
        let scores = [0.1, 0.35, 0.5, 0.62, 0.71, 0.8, 0.85, 0.9, 0.93, 0.99];
        let corpus = Corpus { pairs: scores.iter().map(|&s| scored_pair("aa", s)).collect() };
        let out = hq_filter(&corpus, &FilterPolicy::default()).unwrap();
        assert_eq!(out.corpus.len(), 2);
        for p in &out.corpus.pairs {
            assert_eq!(p.provenance, Provenance::Hq);
            assert!(corpus.pairs.iter().any(|q| q.similarity == p.similarity));
        }
        // Everything retained clears the realized threshold.
        let k = out.realized_k["aa"];
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let std =
            (scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n).sqrt();
        for p in &out.corpus.pairs {
            assert!(p.similarity.unwrap() > mean + k * std);
        }
    }

    #[test]
    fn tiny_language_can_be_excluded_with_warning() {
        let corpus = Corpus { pairs: vec![scored_pair("zz", 0.9), scored_pair("zz", 0.8)] };
        // target 0.2 on n=2 with spread scores: keeping 0 (distance 0.2)
        // beats keeping 1 (distance 0.3), so the language is dropped.
        let out = hq_filter(&corpus, &FilterPolicy::default()).unwrap();
        assert_eq!(out.corpus.len(), 0);
        assert_eq!(out.warnings.len(), 1);
        assert!(out.warnings[0].contains("zz"));
    }

    #[test]
    fn single_score_language_uses_degenerate_fallback() {
        // One pair has sigma = 0, so the top-fraction fallback keeps it.
        let corpus = Corpus { pairs: vec![scored_pair("zz", 0.9)] };
        let out = hq_filter(&corpus, &FilterPolicy::default()).unwrap();
        assert_eq!(out.corpus.len(), 1);
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn global_k_mode_shares_one_k() {
        let mut pairs = Vec::new();
        for i in 0..50 {
            pairs.push(scored_pair("aa", 0.4 + 0.01 * i as f64));
            pairs.push(scored_pair("bb", 0.2 + 0.012 * i as f64));
        }
        let corpus = Corpus { pairs };
        let policy = FilterPolicy { global_k: true, ..FilterPolicy::default() };
        let out = hq_filter(&corpus, &policy).unwrap();
        assert_eq!(out.realized_k["aa"], out.realized_k["bb"]);
        let frac = out.corpus.len() as f64 / corpus.len() as f64;
        assert!((frac - 0.2).abs() <= 0.02, "retained {frac}");
    }

    #[test]
    fn per_language_retention_close_to_target_on_large_groups() {
        let mut pairs = Vec::new();
        for i in 0..200 {
            pairs.push(scored_pair("aa", (i as f64 * 37.0) % 199.0 / 199.0));
            pairs.push(scored_pair("bb", (i as f64 * 53.0) % 197.0 / 197.0));
        }
        let corpus = Corpus { pairs };
        let out = hq_filter(&corpus, &FilterPolicy::default()).unwrap();
        for lang in ["aa", "bb"] {
            let kept = out.corpus.by_language(lang).len() as f64 / 200.0;
            assert!((kept - 0.2).abs() <= 0.02, "{lang} retained {kept}");
        }
    }
}
