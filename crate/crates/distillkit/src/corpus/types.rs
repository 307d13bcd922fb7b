//! Core corpus data types: sentence pairs, language specs, filter policy.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a pair came from: the synthetic "original" data, teacher-generated
/// pseudo-labels, or the high-quality filtered subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Distilled,
    Hq,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Original => "original",
            Provenance::Distilled => "distilled",
            Provenance::Hq => "hq",
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Provenance::Original),
            "distilled" => Ok(Provenance::Distilled),
            "hq" => Ok(Provenance::Hq),
            other => Err(Error::Corpus(format!("unknown provenance '{other}'"))),
        }
    }
}

/// One language-tagged parallel example. The source is stored in the
/// language's native script space; `unify_script` maps it into the shared
/// space when needed.
#[derive(Debug, Clone, PartialEq)]
pub struct SentencePair {
    pub language: String,
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub similarity: Option<f64>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub pairs: Vec<SentencePair>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Distinct language ids in first-appearance order is not deterministic
    /// across reorderings, so languages are reported sorted.
    pub fn languages(&self) -> Vec<String> {
        let mut langs: Vec<String> = self.pairs.iter().map(|p| p.language.clone()).collect();
        langs.sort();
        langs.dedup();
        langs
    }

    pub fn by_language(&self, lang: &str) -> Vec<&SentencePair> {
        self.pairs.iter().filter(|p| p.language == lang).collect()
    }
}

/// Deterministic token-sequence permutation applied when turning the toy
/// "English" sentence into a source-language sentence, standing in for
/// word-order divergence between language families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReorderRule {
    Identity,
    Reverse,
    RotateLeft(usize),
    SwapAdjacent,
}

impl ReorderRule {
    pub fn apply(&self, tokens: &[String]) -> Vec<String> {
        let mut out = tokens.to_vec();
        match self {
            ReorderRule::Identity => {}
            ReorderRule::Reverse => out.reverse(),
            ReorderRule::RotateLeft(k) => {
                if !out.is_empty() {
                    let k = k % out.len();
                    out.rotate_left(k);
                }
            }
            ReorderRule::SwapAdjacent => {
                let mut i = 0;
                while i + 1 < out.len() {
                    out.swap(i, i + 1);
                    i += 2;
                }
            }
        }
        out
    }

    pub fn invert(&self, tokens: &[String]) -> Vec<String> {
        let mut out = tokens.to_vec();
        match self {
            ReorderRule::Identity => {}
            ReorderRule::Reverse => out.reverse(),
            ReorderRule::RotateLeft(k) => {
                if !out.is_empty() {
                    let k = k % out.len();
                    out.rotate_right(k);
                }
            }
            ReorderRule::SwapAdjacent => {
                let mut i = 0;
                while i + 1 < out.len() {
                    out.swap(i, i + 1);
                    i += 2;
                }
            }
        }
        out
    }
}

impl fmt::Display for ReorderRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReorderRule::Identity => write!(f, "identity"),
            ReorderRule::Reverse => write!(f, "reverse"),
            ReorderRule::RotateLeft(k) => write!(f, "rotate_left:{k}"),
            ReorderRule::SwapAdjacent => write!(f, "swap_adjacent"),
        }
    }
}

impl FromStr for ReorderRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(ReorderRule::Identity),
            "reverse" => Ok(ReorderRule::Reverse),
            "swap_adjacent" => Ok(ReorderRule::SwapAdjacent),
            other => {
                if let Some(k) = other.strip_prefix("rotate_left:") {
                    let k = k
                        .parse::<usize>()
                        .map_err(|_| Error::Corpus(format!("bad rotate_left count in '{other}'")))?;
                    Ok(ReorderRule::RotateLeft(k))
                } else {
                    Err(Error::Corpus(format!("unknown reorder rule '{other}'")))
                }
            }
        }
    }
}

impl Serialize for ReorderRule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ReorderRule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Definition of one synthetic language: which family cipher it uses, where
/// its script lives in codepoint space, how it reorders tokens, how many
/// pairs to generate, and how noisy its reference targets are.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub id: String,
    pub family: String,
    pub script_offset: u32,
    pub reorder_rule: ReorderRule,
    pub pair_count: usize,
    pub noise_rate: f64,
}

/// Span of lowercase letters shifted by a script offset.
pub const SCRIPT_SPAN: u32 = 26;

pub fn validate_specs(specs: &[LanguageSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::InvalidConfig("at least one language spec required".into()));
    }
    for s in specs {
        if s.id.is_empty() || s.family.is_empty() {
            return Err(Error::InvalidConfig("language id and family must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&s.noise_rate) {
            return Err(Error::InvalidConfig(format!(
                "noise_rate for '{}' must lie in [0, 1], got {}",
                s.id, s.noise_rate
            )));
        }
        if s.pair_count == 0 {
            return Err(Error::InvalidConfig(format!("pair_count for '{}' must be >= 1", s.id)));
        }
        // The shifted a..z block must stay inside valid scalar space and
        // clear of the surrogate range.
        let lo = 'a' as u32 + s.script_offset;
        let hi = 'z' as u32 + s.script_offset;
        if hi > 0x10FFFF - 1 || (lo <= 0xDFFF && hi >= 0xD800) {
            return Err(Error::InvalidConfig(format!(
                "script_offset {} for '{}' maps letters outside valid codepoints",
                s.script_offset, s.id
            )));
        }
    }
    for (i, a) in specs.iter().enumerate() {
        for b in &specs[i + 1..] {
            if a.id == b.id {
                return Err(Error::InvalidConfig(format!("duplicate language id '{}'", a.id)));
            }
            let d = a.script_offset.abs_diff(b.script_offset);
            if d < SCRIPT_SPAN {
                return Err(Error::InvalidConfig(format!(
                    "script offsets of '{}' and '{}' overlap (distance {d} < {SCRIPT_SPAN})",
                    a.id, b.id
                )));
            }
        }
    }
    Ok(())
}

/// Policy for the per-language high-quality filter. When `k_per_language`
/// supplies an explicit k for a language, that k is used verbatim;
/// otherwise k is searched so the language retains about
/// `target_fraction` of its pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterPolicy {
    pub k_per_language: BTreeMap<String, f64>,
    pub target_fraction: f64,
    /// `false` (default): search k independently per language.
    /// `true`: search one global k shared by every language.
    pub global_k: bool,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy { k_per_language: BTreeMap::new(), target_fraction: 0.20, global_k: false }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.target_fraction && self.target_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "target_fraction must lie in (0, 1], got {}",
                self.target_fraction
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: &str, offset: u32) -> LanguageSpec {
        LanguageSpec {
            id: id.into(),
            family: "f".into(),
            script_offset: offset,
            reorder_rule: ReorderRule::Identity,
            pair_count: 1,
            noise_rate: 0.0,
        }
    }

    #[test]
    fn overlapping_offsets_rejected() {
        let specs = vec![spec("aa", 100), spec("bb", 110)];
        assert!(validate_specs(&specs).is_err());
        let specs = vec![spec("aa", 100), spec("bb", 126)];
        assert!(validate_specs(&specs).is_ok());
    }

    #[test]
    fn reorder_rules_round_trip() {
        let toks: Vec<String> = ["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()).collect();
        for rule in [
            ReorderRule::Identity,
            ReorderRule::Reverse,
            ReorderRule::RotateLeft(2),
            ReorderRule::RotateLeft(7),
            ReorderRule::SwapAdjacent,
        ] {
            let fwd = rule.apply(&toks);
            assert_eq!(rule.invert(&fwd), toks, "rule {rule}");
        }
    }

    #[test]
    fn reorder_rule_string_round_trip() {
        for rule in [
            ReorderRule::Identity,
            ReorderRule::Reverse,
            ReorderRule::RotateLeft(3),
            ReorderRule::SwapAdjacent,
        ] {
            let s = rule.to_string();
            assert_eq!(s.parse::<ReorderRule>().unwrap(), rule);
        }
        assert!("rotate_left:x".parse::<ReorderRule>().is_err());
        assert!("bogus".parse::<ReorderRule>().is_err());
    }

    #[test]
    fn swap_adjacent_is_self_inverse_on_odd_length() {
        let toks: Vec<String> = ["1", "2", "3"].iter().map(|s| s.to_string()).collect();
        let rule = ReorderRule::SwapAdjacent;
        assert_eq!(rule.apply(&rule.apply(&toks)), toks);
    }
}
