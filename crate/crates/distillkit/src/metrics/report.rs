//! Per-run evaluation reports: one row of metrics per language, unweighted
//! averages across languages, and two serializations — canonical JSON that
//! round-trips exactly, and an aligned plain-text table with an "Avg"
//! footer for reading at the terminal.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metrics for one language's test rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageEval {
    pub bleu: f64,
    pub chrf: f64,
    pub latency_s: f64,
    pub n_sentences: usize,
}

/// Unweighted means over languages (every language counts once, however
/// many sentences it has).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalAverages {
    pub bleu: f64,
    pub chrf: f64,
    pub latency_s: f64,
}

/// A complete evaluation of one model on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub model_name: String,
    pub param_count: u64,
    /// Fingerprint of the configuration the run was produced under, so a
    /// report can never be mistaken for a different setup's numbers.
    pub config_fingerprint: String,
    pub per_language: BTreeMap<String, LanguageEval>,
    pub averages: EvalAverages,
}

fn mean_over_languages(per_language: &BTreeMap<String, LanguageEval>) -> EvalAverages {
    let n = per_language.len() as f64;
    EvalAverages {
        bleu: per_language.values().map(|e| e.bleu).sum::<f64>() / n,
        chrf: per_language.values().map(|e| e.chrf).sum::<f64>() / n,
        latency_s: per_language.values().map(|e| e.latency_s).sum::<f64>() / n,
    }
}

impl EvalReport {
    /// Assemble a report, computing the averages and validating ranges.
    pub fn new(
        model_name: impl Into<String>,
        param_count: u64,
        config_fingerprint: impl Into<String>,
        per_language: BTreeMap<String, LanguageEval>,
    ) -> Result<Self> {
        if per_language.is_empty() {
            return Err(Error::InvalidConfig("eval report needs at least one language".into()));
        }
        let averages = mean_over_languages(&per_language);
        let report = EvalReport {
            model_name: model_name.into(),
            param_count,
            config_fingerprint: config_fingerprint.into(),
            per_language,
            averages,
        };
        report.validate()?;
        Ok(report)
    }

    /// Range and consistency checks. The stored averages must equal the
    /// recomputed means bit for bit: canonical JSON preserves every f64
    /// exactly, so any mismatch means the report was edited by hand.
    pub fn validate(&self) -> Result<()> {
        if self.per_language.is_empty() {
            return Err(Error::InvalidConfig("eval report needs at least one language".into()));
        }
        for (lang, eval) in &self.per_language {
            if !(0.0..=100.0).contains(&eval.bleu) || !(0.0..=100.0).contains(&eval.chrf) {
                return Err(Error::InvalidConfig(format!(
                    "{lang}: BLEU {} / chrF++ {} outside [0, 100]",
                    eval.bleu, eval.chrf
                )));
            }
            if !eval.latency_s.is_finite() || eval.latency_s < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{lang}: latency {} is not a non-negative real",
                    eval.latency_s
                )));
            }
        }
        let expect = mean_over_languages(&self.per_language);
        if self.averages != expect {
            return Err(Error::InvalidConfig(
                "averages disagree with the per-language rows".into(),
            ));
        }
        Ok(())
    }

    /// Canonical machine-readable form.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("eval reports always serialize")
    }

    /// Parse and validate a canonical JSON report.
    pub fn from_json(text: &str) -> Result<Self> {
        let report: EvalReport =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("eval report: {e}")))?;
        report.validate()?;
        Ok(report)
    }

    /// Aligned plain-text table: one row per language, "Avg" footer with
    /// the unweighted means and the total sentence count. Values are
    /// rounded for reading; the JSON form is the canonical one.
    pub fn render_table(&self) -> String {
        let lang_width = self
            .per_language
            .keys()
            .map(|l| l.len())
            .chain(["language".len(), "Avg".len()])
            .max()
            .unwrap_or(8);
        let mut out = String::new();
        let _ = writeln!(out, "model: {} ({} params)", self.model_name, self.param_count);
        let _ = writeln!(out, "config: {}", self.config_fingerprint);
        let _ = writeln!(
            out,
            "{:<lang_width$}  {:>8}  {:>8}  {:>12}  {:>9}",
            "language", "BLEU", "chrF++", "latency_s", "sentences"
        );
        let mut total_sentences = 0usize;
        for (lang, eval) in &self.per_language {
            total_sentences += eval.n_sentences;
            let _ = writeln!(
                out,
                "{:<lang_width$}  {:>8.2}  {:>8.2}  {:>12.4}  {:>9}",
                lang, eval.bleu, eval.chrf, eval.latency_s, eval.n_sentences
            );
        }
        let _ = writeln!(
            out,
            "{:<lang_width$}  {:>8.2}  {:>8.2}  {:>12.4}  {:>9}",
            "Avg",
            self.averages.bleu,
            self.averages.chrf,
            self.averages.latency_s,
            total_sentences
        );
        out
    }
}
