//! Stage configuration: the TOML file behind `distillkit <stage> --config`.
//!
//! One file describes one stage run. Artifact paths default to a fixed
//! layout under the output root, so a minimal config often needs nothing
//! beyond the stage name, a seed, and the stage's own knobs; every default
//! can be overridden per path.
//!
//! Published training constants are kept at their reported values and
//! scaled by the single `DESK_SCALE` divisor where they are counts (batch
//! tokens, warmup steps, adapter bottleneck, position table). Rates (learning
//! rates, dropout, label smoothing) are scale-free and stay as published.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::types::{FilterPolicy, LanguageSpec};
use crate::distill::DistillPlan;
use crate::error::{Error, Result};
use crate::model::{published_config, ModelConfig};
use crate::numerics::optimizer::OptimizerConfig;
use crate::pipeline::manifest::sha256_hex;

/// Single divisor taking published size constants to desk scale.
pub const DESK_SCALE: usize = 32;
/// Published global batch, in target tokens.
pub const PUBLISHED_BATCH_TOKENS: usize = 64_000;
/// Published high-quality fine-tuning batch, in target tokens.
pub const PUBLISHED_HQ_BATCH_TOKENS: usize = 24_000;
/// Published warmup length, in updates.
pub const PUBLISHED_WARMUP_STEPS: u64 = 4_000;
/// Published adapter bottleneck width.
pub const PUBLISHED_BOTTLENECK: usize = 256;

/// Desk-scale training batch (tokens per update).
pub const DESK_BATCH_TOKENS: usize = PUBLISHED_BATCH_TOKENS / DESK_SCALE;
/// Desk-scale high-quality fine-tuning batch.
pub const DESK_HQ_BATCH_TOKENS: usize = PUBLISHED_HQ_BATCH_TOKENS / DESK_SCALE;
/// Desk-scale warmup length.
pub const DESK_WARMUP_STEPS: u64 = PUBLISHED_WARMUP_STEPS / DESK_SCALE as u64;
/// Desk-scale adapter bottleneck.
pub const DESK_BOTTLENECK: usize = PUBLISHED_BOTTLENECK / DESK_SCALE;
/// Desk-scale default update budget and evaluation cadence.
pub const DESK_MAX_UPDATES: u64 = 2_000;
pub const DESK_EVAL_INTERVAL: u64 = 250;

/// High-quality fine-tuning learning rate (scale-free).
pub const HQ_FINETUNE_LR: f64 = 3e-5;
/// Adapter fine-tuning learning rate (scale-free).
pub const ADAPTER_LR: f64 = 1e-3;

/// Deterministic-mode toggle: when this environment variable is set to a
/// non-empty value other than "0", stages whose outputs depend on wall
/// clocks (bench) refuse to run, so everything written is reproducible
/// byte for byte from (inputs, seed).
pub const DETERMINISTIC_ENV: &str = "DISTILLKIT_DETERMINISTIC";

/// True when deterministic mode is switched on in the environment.
pub fn deterministic_mode() -> bool {
    match std::env::var(DETERMINISTIC_ENV) {
        Ok(v) => !v.is_empty() && v != "0",
        Err(_) => false,
    }
}

/// The ten pipeline stages, in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    TrainTeacher,
    DistillData,
    TrainStudent,
    HqFilter,
    FinetuneHq,
    AdapterFinetune,
    Evaluate,
    Bench,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::GenData,
        Stage::TrainTeacher,
        Stage::DistillData,
        Stage::TrainStudent,
        Stage::HqFilter,
        Stage::FinetuneHq,
        Stage::AdapterFinetune,
        Stage::Evaluate,
        Stage::Bench,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainTeacher => "train-teacher",
            Stage::DistillData => "distill-data",
            Stage::TrainStudent => "train-student",
            Stage::HqFilter => "hq-filter",
            Stage::FinetuneHq => "finetune-hq",
            Stage::AdapterFinetune => "adapter-finetune",
            Stage::Evaluate => "evaluate",
            Stage::Bench => "bench",
            Stage::Report => "report",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.iter().copied().find(|st| st.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = Stage::ALL.iter().map(|st| st.as_str()).collect();
            Error::InvalidConfig(format!("unknown stage '{s}' (expected one of {names:?})"))
        })
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Artifact paths. Everything is optional; unset fields resolve to the
/// fixed layout under the output root (see the `resolve_*` methods on
/// [`StageConfig`]).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Training corpus. For `train-student` this is the lever that picks
    /// the variant: the distilled corpus (default) or the original one.
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Language spec file written by gen-data.
    pub languages: Option<PathBuf>,
    pub vocab_src: Option<PathBuf>,
    pub vocab_tgt: Option<PathBuf>,
    /// Input checkpoint (finetune-hq, adapter-finetune, evaluate, bench).
    pub checkpoint: Option<PathBuf>,
    /// Teacher checkpoint (distill-data; train-student under KD modes).
    pub teacher: Option<PathBuf>,
    /// Distilled corpus (hq-filter input; distill-data output).
    pub distilled: Option<PathBuf>,
    /// High-quality corpus (finetune-hq input; hq-filter output).
    pub hq: Option<PathBuf>,
    /// Bench report merged into evaluation latency columns.
    pub bench_report: Option<PathBuf>,
    /// Evaluation reports aggregated by the report stage.
    pub reports: Vec<PathBuf>,
}

/// Model reference: a named preset (the published grid at desk scale)
/// and/or direct field overrides. Vocabulary sizes always come from the
/// trained vocabulary files, never from here.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub d_model: Option<usize>,
    pub d_ff: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub unique_layers: Option<usize>,
    pub max_positions: Option<usize>,
    pub pre_norm: Option<bool>,
    pub embed_layernorm: Option<bool>,
}

/// The published architecture grid with widths and the position table
/// divided by `DESK_SCALE`; depth and head counts are preserved (depth is
/// what the deepened and tied variants are about).
pub fn desk_preset(name: &str) -> Option<ModelConfig> {
    let full = published_config(name)?;
    Some(ModelConfig {
        d_model: full.d_model / DESK_SCALE,
        d_ff: full.d_ff / DESK_SCALE,
        layers: full.layers,
        heads: full.heads,
        unique_layers: full.unique_layers,
        max_positions: full.max_positions / DESK_SCALE,
        ..full
    })
}

impl ModelSection {
    /// Materialize a validated config, with vocabulary sizes taken from
    /// the actual trained vocabularies.
    pub fn resolve(&self, vocab_src: usize, vocab_tgt: usize) -> Result<ModelConfig> {
        let mut cfg = match &self.preset {
            Some(name) => desk_preset(name).ok_or_else(|| {
                Error::InvalidConfig(format!("unknown model preset '{name}'"))
            })?,
            None => ModelConfig::default(),
        };
        if let Some(v) = self.d_model {
            cfg.d_model = v;
        }
        if let Some(v) = self.d_ff {
            cfg.d_ff = v;
        }
        if let Some(v) = self.layers {
            cfg.layers = v;
            // A plain depth override keeps the stack untied unless
            // unique_layers is itself overridden.
            if self.unique_layers.is_none() && self.preset.is_none() {
                cfg.unique_layers = v;
            }
        }
        if let Some(v) = self.heads {
            cfg.heads = v;
        }
        if let Some(v) = self.unique_layers {
            cfg.unique_layers = v;
        }
        if let Some(v) = self.max_positions {
            cfg.max_positions = v;
        }
        if let Some(v) = self.pre_norm {
            cfg.pre_norm = v;
        }
        if let Some(v) = self.embed_layernorm {
            cfg.embed_layernorm = v;
        }
        cfg.vocab_src = vocab_src;
        cfg.vocab_tgt = vocab_tgt;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Optimizer overrides, applied on top of the desk defaults (published
/// values with warmup scaled by `DESK_SCALE`).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub base_lr: Option<f64>,
    pub betas: Option<(f64, f64)>,
    pub warmup_steps: Option<u64>,
    pub max_grad_norm: Option<f64>,
    pub label_smoothing: Option<f64>,
    pub dropout: Option<f64>,
}

/// Desk-default optimizer: published settings, warmup scaled down.
pub fn desk_optimizer_defaults() -> OptimizerConfig {
    OptimizerConfig { warmup_steps: DESK_WARMUP_STEPS, ..OptimizerConfig::default() }
}

impl OptimizerSection {
    pub fn apply(&self, base: &OptimizerConfig) -> Result<OptimizerConfig> {
        let cfg = OptimizerConfig {
            base_lr: self.base_lr.unwrap_or(base.base_lr),
            betas: self.betas.unwrap_or(base.betas),
            warmup_steps: self.warmup_steps.unwrap_or(base.warmup_steps),
            max_grad_norm: self.max_grad_norm.unwrap_or(base.max_grad_norm),
            label_smoothing: self.label_smoothing.unwrap_or(base.label_smoothing),
            dropout: self.dropout.unwrap_or(base.dropout),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Update budget and evaluation cadence.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub max_updates: u64,
    pub eval_interval: u64,
    pub batch_tokens: usize,
    pub patience: usize,
    /// Beam width for dev-set decoding during training.
    pub dev_beam: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            max_updates: DESK_MAX_UPDATES,
            eval_interval: DESK_EVAL_INTERVAL,
            batch_tokens: DESK_BATCH_TOKENS,
            patience: crate::metrics::DEFAULT_PATIENCE,
            dev_beam: 1,
        }
    }
}

impl ScheduleSection {
    pub fn validate(&self) -> Result<()> {
        if self.eval_interval == 0 {
            return Err(Error::InvalidConfig("eval_interval must be at least 1".into()));
        }
        if self.batch_tokens == 0 {
            return Err(Error::InvalidConfig("batch_tokens must be at least 1".into()));
        }
        if self.dev_beam == 0 {
            return Err(Error::InvalidConfig("dev_beam must be at least 1".into()));
        }
        Ok(())
    }
}

/// Synthetic-corpus generation settings (gen-data).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub languages: Vec<LanguageSpec>,
    #[serde(default = "default_vocab_size")]
    pub vocab_src_size: usize,
    #[serde(default = "default_vocab_size")]
    pub vocab_tgt_size: usize,
    #[serde(default = "default_split_fraction")]
    pub dev_fraction: f64,
    #[serde(default = "default_split_fraction")]
    pub test_fraction: f64,
}

fn default_vocab_size() -> usize {
    256
}

fn default_split_fraction() -> f64 {
    0.1
}

/// Decode settings for stages that run the decoder (distill-data,
/// evaluate). The beam default differs by stage: distillation uses the
/// model's default beam, evaluation uses greedy.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub beam: Option<usize>,
    pub length_penalty: Option<f64>,
    /// Evaluation-time adapter routing: unset keeps the checkpoint's own
    /// active group; "base" deactivates adapters; any other value names
    /// the group to activate.
    pub adapter_group: Option<String>,
}

/// High-quality filter settings (hq-filter).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub target_retention: f64,
    pub global_k: bool,
    pub k_per_language: BTreeMap<String, f64>,
}

impl Default for FilterSection {
    fn default() -> Self {
        let p = FilterPolicy::default();
        FilterSection {
            target_retention: p.target_fraction,
            global_k: p.global_k,
            k_per_language: p.k_per_language,
        }
    }
}

impl FilterSection {
    pub fn policy(&self) -> FilterPolicy {
        FilterPolicy {
            k_per_language: self.k_per_language.clone(),
            target_fraction: self.target_retention,
            global_k: self.global_k,
        }
    }
}

/// Adapter fine-tuning settings (adapter-finetune; optional group routing
/// for evaluate lives in [`DecodeSection`]).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSection {
    /// A language id or a family id; resolves to the matching subset of
    /// the training corpus.
    pub group: String,
    #[serde(default = "default_bottleneck")]
    pub bottleneck: usize,
    #[serde(default = "default_adapter_dropout")]
    pub adapter_dropout: f64,
    /// Per-group warmup override (some groups need longer ramps).
    pub warmup: Option<u64>,
    pub lr: Option<f64>,
}

fn default_bottleneck() -> usize {
    DESK_BOTTLENECK
}

fn default_adapter_dropout() -> f64 {
    0.1
}

/// Fine-tuning profile: the stage-2 (high-quality) and adapter learning
/// setups, with desk-scaled batch sizes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneProfile {
    pub lr: f64,
    pub batch_tokens: usize,
    pub adapter_lr: f64,
    pub adapter_warmup: u64,
}

impl Default for FinetuneProfile {
    fn default() -> Self {
        FinetuneProfile {
            lr: HQ_FINETUNE_LR,
            batch_tokens: DESK_HQ_BATCH_TOKENS,
            adapter_lr: ADAPTER_LR,
            adapter_warmup: DESK_WARMUP_STEPS,
        }
    }
}

impl FinetuneProfile {
    /// The high-quality pass must run gentler than base training.
    pub fn validate(&self, base_training_lr: f64) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.adapter_lr > 0.0) {
            return Err(Error::InvalidConfig("fine-tune learning rates must be positive".into()));
        }
        if self.lr >= base_training_lr {
            return Err(Error::InvalidConfig(format!(
                "high-quality fine-tune lr {} must be below the base training lr {}",
                self.lr, base_training_lr
            )));
        }
        if self.batch_tokens == 0 {
            return Err(Error::InvalidConfig("fine-tune batch_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

/// Latency benchmarking settings (bench).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub batch_size: usize,
    pub repeats: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            batch_size: crate::metrics::DEFAULT_BENCH_BATCH,
            repeats: crate::metrics::DEFAULT_BENCH_REPEATS,
        }
    }
}

/// One stage run, as described by its TOML file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    /// Artifact name: student/report identity. Defaults per stage.
    pub name: Option<String>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Output root; the CLI `--out` flag overrides it. Default "runs".
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub model: ModelSection,
    pub distill: Option<DistillPlan>,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    pub generate: Option<GenerateSection>,
    #[serde(default)]
    pub decode: DecodeSection,
    #[serde(default)]
    pub filter: FilterSection,
    pub adapter: Option<AdapterSection>,
    #[serde(default)]
    pub finetune: FinetuneProfile,
    #[serde(default)]
    pub bench: BenchSection,
}

fn default_seed() -> u64 {
    1
}

/// A parsed config plus the fingerprint of the exact bytes it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub cfg: StageConfig,
    pub config_sha256: String,
    pub config_path: PathBuf,
}

/// Read and parse a stage config file.
pub fn load_stage_config(path: &Path) -> Result<LoadedConfig> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Precondition(format!("cannot read config {}: {e}", path.display()))
    })?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| Error::Parse(format!("{}: config is not UTF-8", path.display())))?;
    let cfg: StageConfig = toml::from_str(text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(LoadedConfig {
        cfg,
        config_sha256: sha256_hex(&bytes),
        config_path: path.to_path_buf(),
    })
}

impl StageConfig {
    /// Cross-field checks that do not need the filesystem.
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if let Some(plan) = &self.distill {
            plan.validate()?;
        }
        if let Some(generate) = &self.generate {
            if !(0.0 < generate.dev_fraction && generate.dev_fraction < 0.5)
                || !(0.0 < generate.test_fraction && generate.test_fraction < 0.5)
            {
                return Err(Error::InvalidConfig(
                    "dev_fraction and test_fraction must lie in (0, 0.5)".into(),
                ));
            }
        }
        if let Some(beam) = self.decode.beam {
            if beam == 0 {
                return Err(Error::InvalidConfig("decode beam must be at least 1".into()));
            }
        }
        if self.bench.batch_size == 0 || self.bench.repeats == 0 {
            return Err(Error::InvalidConfig(
                "bench batch_size and repeats must be at least 1".into(),
            ));
        }
        // Stage-specific required sections.
        match self.stage {
            Stage::GenData if self.generate.is_none() => Err(Error::InvalidConfig(
                "gen-data needs a [generate] section with [[generate.languages]]".into(),
            )),
            Stage::AdapterFinetune if self.adapter.is_none() => Err(Error::InvalidConfig(
                "adapter-finetune needs an [adapter] section naming the group".into(),
            )),
            Stage::Report if self.paths.reports.is_empty() => Err(Error::InvalidConfig(
                "report needs paths.reports listing at least one evaluation".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Output root after the CLI override.
    pub fn out_root(&self, cli_out: Option<&Path>) -> PathBuf {
        cli_out
            .map(Path::to_path_buf)
            .or_else(|| self.out.clone())
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// Artifact name, defaulted per stage.
    pub fn artifact_name(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        match self.stage {
            Stage::TrainTeacher => "teacher".to_string(),
            // Distinct from "student": fine-tuning continues from the
            // student's checkpoint and must not write into its directory.
            Stage::FinetuneHq => "student-hq".to_string(),
            Stage::AdapterFinetune => self
                .adapter
                .as_ref()
                .map(|a| format!("adapter-{}", a.group))
                .unwrap_or_else(|| "adapter".to_string()),
            Stage::Report => "summary".to_string(),
            _ => "student".to_string(),
        }
    }
}

/// Fixed artifact layout under the output root.
pub mod layout {
    use std::path::{Path, PathBuf};

    pub fn train_tsv(out: &Path) -> PathBuf {
        out.join("corpus/train.tsv")
    }
    pub fn dev_tsv(out: &Path) -> PathBuf {
        out.join("corpus/dev.tsv")
    }
    pub fn test_tsv(out: &Path) -> PathBuf {
        out.join("corpus/test.tsv")
    }
    pub fn languages_json(out: &Path) -> PathBuf {
        out.join("corpus/languages.json")
    }
    pub fn distilled_tsv(out: &Path) -> PathBuf {
        out.join("corpus/distilled.tsv")
    }
    pub fn dropped_log(out: &Path) -> PathBuf {
        out.join("corpus/distilled.dropped.txt")
    }
    pub fn hq_tsv(out: &Path) -> PathBuf {
        out.join("corpus/hq.tsv")
    }
    pub fn vocab_src(out: &Path) -> PathBuf {
        out.join("vocab/src.vocab")
    }
    pub fn vocab_tgt(out: &Path) -> PathBuf {
        out.join("vocab/tgt.vocab")
    }
    pub fn model_dir(out: &Path, name: &str) -> PathBuf {
        out.join("models").join(name)
    }
    pub fn best_checkpoint(dir: &Path) -> PathBuf {
        dir.join("best.dkcp")
    }
    pub fn final_checkpoint(dir: &Path) -> PathBuf {
        dir.join("final.dkcp")
    }
    pub fn history_json(dir: &Path) -> PathBuf {
        dir.join("history.json")
    }
    pub fn eval_json(out: &Path, name: &str) -> PathBuf {
        out.join("reports").join(format!("{name}.eval.json"))
    }
    pub fn eval_txt(out: &Path, name: &str) -> PathBuf {
        out.join("reports").join(format!("{name}.eval.txt"))
    }
    pub fn bench_json(out: &Path, name: &str) -> PathBuf {
        out.join("reports").join(format!("{name}.bench.json"))
    }
    pub fn summary_txt(out: &Path) -> PathBuf {
        out.join("reports/summary.txt")
    }
    pub fn summary_json(out: &Path) -> PathBuf {
        out.join("reports/summary.json")
    }
    pub fn manifest(out: &Path, stage: &str, name: &str) -> PathBuf {
        out.join("manifests").join(format!("{stage}-{name}.json"))
    }
}
