//! The ten pipeline stages behind `distillkit <stage> --config <file>`.
//!
//! Conventions shared by every stage: inputs resolve through the `[paths]`
//! section with fixed-layout defaults under the output root, outputs
//! always go to the fixed layout, and each run ends by writing a manifest
//! that content-addresses everything read and written. Stages that need an
//! artifact from an earlier stage fail with a precondition error naming
//! that stage. All outputs are deterministic in (inputs, seed) except
//! bench, whose reports contain wall-clock measurements; bench therefore
//! refuses to run in deterministic mode.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::corpus::io::{atomic_write, read_corpus, read_vocab, write_corpus, write_vocab};
use crate::corpus::score::hq_filter;
use crate::corpus::subword::Vocab;
use crate::corpus::subword::{train_subword_vocab, EOS};
use crate::corpus::synth::{make_synthetic_corpus, rescore_against_oracle};
use crate::corpus::types::{validate_specs, Corpus, LanguageSpec, Provenance};
use crate::distill::{decode_budget, distill_corpus, DistillMode, DistillPlan, TrainState};
use crate::error::{Error, Result};
use crate::metrics::{chrf_pp, corpus_bleu, benchmark_latency, EvalReport, LanguageEval, LatencyReport};
use crate::model::{load_checkpoint, parse_checkpoint, AdapterConfig, Model, DEFAULT_BEAM};
use crate::numerics::optimizer::OptimizerConfig;
use crate::pipeline::config::{
    desk_optimizer_defaults, deterministic_mode, layout, LoadedConfig, ScheduleSection, Stage,
    StageConfig, DETERMINISTIC_ENV,
};
use crate::pipeline::data::{
    encode_samples, ensure_unified, filter_languages, resolve_group_languages, split_corpus,
};
use crate::pipeline::manifest::{sha256_hex, Manifest, ManifestBuilder};
use crate::pipeline::train::{train_loop, DevSet, TrainOutcome};

/// What a finished stage hands back to the CLI.
#[derive(Debug)]
pub struct StageOutcome {
    pub stage: Stage,
    pub name: String,
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    /// Human-readable result lines, one per printed row.
    pub lines: Vec<String>,
}

/// Run the stage a loaded config describes. `seed` and `out` are the CLI
/// overrides.
pub fn run_stage(
    loaded: &LoadedConfig,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<StageOutcome> {
    let mut cfg = loaded.cfg.clone();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let ctx = StageContext {
        out: cfg.out_root(out),
        name: cfg.artifact_name(),
        config_sha256: loaded.config_sha256.clone(),
        cfg,
    };
    match ctx.cfg.stage {
        Stage::GenData => gen_data(&ctx),
        Stage::TrainTeacher => train_teacher(&ctx),
        Stage::DistillData => distill_data(&ctx),
        Stage::TrainStudent => train_student(&ctx),
        Stage::HqFilter => hq_filter_stage(&ctx),
        Stage::FinetuneHq => finetune_hq(&ctx),
        Stage::AdapterFinetune => adapter_finetune(&ctx),
        Stage::Evaluate => evaluate(&ctx),
        Stage::Bench => bench(&ctx),
        Stage::Report => report(&ctx),
    }
}

struct StageContext {
    cfg: StageConfig,
    out: PathBuf,
    name: String,
    config_sha256: String,
}

fn require_file(path: &Path, hint: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Precondition(format!("{} not found; {hint}", path.display())));
    }
    Ok(())
}

impl StageContext {
    fn manifest(&self) -> ManifestBuilder {
        ManifestBuilder::new(
            &self.out,
            self.cfg.stage.as_str(),
            &self.name,
            self.cfg.seed,
            &self.config_sha256,
        )
    }

    fn manifest_path(&self) -> PathBuf {
        layout::manifest(&self.out, self.cfg.stage.as_str(), &self.name)
    }

    fn finish(&self, builder: ManifestBuilder, lines: Vec<String>) -> Result<StageOutcome> {
        let manifest_path = self.manifest_path();
        let manifest = builder.write(&manifest_path)?;
        Ok(StageOutcome { stage: self.cfg.stage, name: self.name.clone(), manifest, manifest_path, lines })
    }

    // ---- input resolution (paths section, fixed-layout defaults) ----

    fn train_path(&self, default: PathBuf) -> PathBuf {
        self.cfg.paths.train.clone().unwrap_or(default)
    }

    fn dev_path(&self) -> PathBuf {
        self.cfg.paths.dev.clone().unwrap_or_else(|| layout::dev_tsv(&self.out))
    }

    fn test_path(&self) -> PathBuf {
        self.cfg.paths.test.clone().unwrap_or_else(|| layout::test_tsv(&self.out))
    }

    fn languages_path(&self) -> PathBuf {
        self.cfg.paths.languages.clone().unwrap_or_else(|| layout::languages_json(&self.out))
    }

    fn vocab_src_path(&self) -> PathBuf {
        self.cfg.paths.vocab_src.clone().unwrap_or_else(|| layout::vocab_src(&self.out))
    }

    fn vocab_tgt_path(&self) -> PathBuf {
        self.cfg.paths.vocab_tgt.clone().unwrap_or_else(|| layout::vocab_tgt(&self.out))
    }

    fn distilled_path(&self) -> PathBuf {
        self.cfg.paths.distilled.clone().unwrap_or_else(|| layout::distilled_tsv(&self.out))
    }

    fn hq_path(&self) -> PathBuf {
        self.cfg.paths.hq.clone().unwrap_or_else(|| layout::hq_tsv(&self.out))
    }

    fn teacher_ckpt_path(&self) -> PathBuf {
        self.cfg.paths.teacher.clone().unwrap_or_else(|| {
            layout::best_checkpoint(&layout::model_dir(&self.out, "teacher"))
        })
    }

    fn checkpoint_path(&self, default_name: &str) -> PathBuf {
        self.cfg.paths.checkpoint.clone().unwrap_or_else(|| {
            layout::best_checkpoint(&layout::model_dir(&self.out, default_name))
        })
    }

    // ---- shared loaders ----

    fn load_specs(&self) -> Result<Vec<LanguageSpec>> {
        let path = self.languages_path();
        require_file(&path, "run gen-data first")?;
        let text = fs::read_to_string(&path)?;
        let specs: Vec<LanguageSpec> = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        validate_specs(&specs)?;
        Ok(specs)
    }

    fn load_vocabs(&self) -> Result<(Vocab, Vocab)> {
        let src_path = self.vocab_src_path();
        let tgt_path = self.vocab_tgt_path();
        require_file(&src_path, "run gen-data first")?;
        require_file(&tgt_path, "run gen-data first")?;
        Ok((read_vocab(&src_path)?, read_vocab(&tgt_path)?))
    }

    fn read_corpus_required(&self, path: &Path, hint: &str) -> Result<Corpus> {
        require_file(path, hint)?;
        let corpus = read_corpus(path)?;
        if corpus.is_empty() {
            return Err(Error::Corpus(format!("{} holds no sentence pairs", path.display())));
        }
        Ok(corpus)
    }

    /// Reject a `[distill]` section on stages that train plain cross
    /// entropy by construction.
    fn reject_distill_section(&self, why: &str) -> Result<()> {
        match &self.cfg.distill {
            Some(plan) if plan.mode != DistillMode::None => Err(Error::InvalidConfig(format!(
                "{} {why}; remove the [distill] section or set mode = \"none\"",
                self.cfg.stage
            ))),
            _ => Ok(()),
        }
    }
}

fn check_vocab_compat(model: &Model, vs: &Vocab, vt: &Vocab, what: &str) -> Result<()> {
    if model.cfg.vocab_src != vs.len() || model.cfg.vocab_tgt != vt.len() {
        return Err(Error::Precondition(format!(
            "{what} was trained with vocabularies {}/{} but the files provide {}/{}; \
             point paths.vocab_src/vocab_tgt at the run that produced it",
            model.cfg.vocab_src,
            model.cfg.vocab_tgt,
            vs.len(),
            vt.len(),
        )));
    }
    Ok(())
}

/// Everything a training stage needs in memory.
struct TrainSetup {
    vocab_src: Vocab,
    vocab_tgt: Vocab,
    samples: Vec<crate::distill::TrainSample>,
    dev: DevSet,
    train_corpus_path: PathBuf,
    dev_corpus_path: PathBuf,
    n_train_pairs: usize,
}

fn load_train_setup(
    ctx: &StageContext,
    train_path: PathBuf,
    train_hint: &str,
    language_subset: Option<&[String]>,
) -> Result<TrainSetup> {
    let specs = ctx.load_specs()?;
    let (vocab_src, vocab_tgt) = ctx.load_vocabs()?;
    let mut train = ctx.read_corpus_required(&train_path, train_hint)?;
    let dev_path = ctx.dev_path();
    let mut dev_corpus = ctx.read_corpus_required(&dev_path, "run gen-data first")?;
    if let Some(langs) = language_subset {
        train = filter_languages(&train, langs);
        dev_corpus = filter_languages(&dev_corpus, langs);
        if train.is_empty() {
            return Err(Error::Corpus(format!(
                "no training pairs for languages {langs:?} in {}",
                train_path.display()
            )));
        }
        if dev_corpus.is_empty() {
            return Err(Error::Corpus(format!(
                "no dev pairs for languages {langs:?} in {}",
                dev_path.display()
            )));
        }
    }
    let unified_train = ensure_unified(&train, &specs)?;
    let unified_dev = ensure_unified(&dev_corpus, &specs)?;
    let samples = encode_samples(&unified_train, &vocab_src, &vocab_tgt);
    let dev = DevSet::from_corpus(&unified_dev, &vocab_src);
    Ok(TrainSetup {
        vocab_src,
        vocab_tgt,
        samples,
        dev,
        train_corpus_path: train_path,
        dev_corpus_path: dev_path,
        n_train_pairs: train.len(),
    })
}

/// Run the loop, persist the history, and stamp the common artifacts into
/// the manifest. Shared by every stage that trains.
#[allow(clippy::too_many_arguments)]
fn run_training(
    ctx: &StageContext,
    model: &mut Model,
    teacher: Option<&Model>,
    setup: &TrainSetup,
    plan: &DistillPlan,
    opt: &OptimizerConfig,
    schedule: &ScheduleSection,
    state: &mut TrainState,
    builder: &mut ManifestBuilder,
) -> Result<(TrainOutcome, Vec<String>)> {
    let dir = layout::model_dir(&ctx.out, &ctx.name);
    fs::create_dir_all(&dir)?;
    let outcome = train_loop(
        model,
        teacher,
        &setup.samples,
        &setup.dev,
        &setup.vocab_tgt,
        plan,
        opt,
        schedule,
        state,
        &dir,
    )?;
    let history_path = layout::history_json(&dir);
    let history_json =
        serde_json::to_string_pretty(&outcome).expect("train outcomes always serialize");
    atomic_write(&history_path, history_json.as_bytes())?;

    builder.input(&setup.train_corpus_path)?;
    builder.input(&setup.dev_corpus_path)?;
    builder.input(&ctx.languages_path())?;
    builder.input(&ctx.vocab_src_path())?;
    builder.input(&ctx.vocab_tgt_path())?;
    builder.output(&layout::best_checkpoint(&dir))?;
    builder.output(&layout::final_checkpoint(&dir))?;
    builder.output(&history_path)?;
    builder.note(format!(
        "trained to update {} over {} pairs; best dev BLEU {} at update {}{}",
        outcome.final_step,
        setup.n_train_pairs,
        outcome.best_dev_bleu.map_or("n/a".to_string(), |b| format!("{b:.2}")),
        outcome.best_step,
        if outcome.stopped_early { " (stopped early)" } else { "" },
    ));

    let lines = vec![
        format!(
            "{}: {} parameters, trained to update {}",
            ctx.name,
            model.n_params(),
            outcome.final_step
        ),
        format!(
            "best dev BLEU {} at update {}{}",
            outcome.best_dev_bleu.map_or("n/a".to_string(), |b| format!("{b:.2}")),
            outcome.best_step,
            if outcome.stopped_early { " (stopped early)" } else { "" },
        ),
        format!("checkpoints: {}", dir.display()),
    ];
    Ok((outcome, lines))
}

// ---------------------------------------------------------------- stages

fn gen_data(ctx: &StageContext) -> Result<StageOutcome> {
    let generate = ctx.cfg.generate.as_ref().expect("validated by StageConfig::validate");
    let specs = &generate.languages;
    validate_specs(specs)?;
    let corpus = make_synthetic_corpus(specs, ctx.cfg.seed)?;
    // Vocabularies are trained on the full corpus so every split stays
    // inside the learned alphabet; subwords carry no pair-level signal.
    let (vocab_src, vocab_tgt) =
        train_subword_vocab(&corpus, specs, generate.vocab_src_size, generate.vocab_tgt_size)?;
    let (train, dev, test) = split_corpus(
        &corpus,
        specs,
        generate.dev_fraction,
        generate.test_fraction,
        ctx.cfg.seed,
    )?;

    let train_path = layout::train_tsv(&ctx.out);
    let dev_path = layout::dev_tsv(&ctx.out);
    let test_path = layout::test_tsv(&ctx.out);
    let languages_path = layout::languages_json(&ctx.out);
    let vs_path = layout::vocab_src(&ctx.out);
    let vt_path = layout::vocab_tgt(&ctx.out);
    write_corpus(&train_path, &train)?;
    write_corpus(&dev_path, &dev)?;
    write_corpus(&test_path, &test)?;
    let specs_json = serde_json::to_string_pretty(specs).expect("specs always serialize");
    atomic_write(&languages_path, specs_json.as_bytes())?;
    write_vocab(&vs_path, &vocab_src)?;
    write_vocab(&vt_path, &vocab_tgt)?;

    let mut builder = ctx.manifest();
    for p in [&train_path, &dev_path, &test_path, &languages_path, &vs_path, &vt_path] {
        builder.output(p)?;
    }
    builder.note(format!(
        "{} languages, {} pairs ({} train / {} dev / {} test)",
        specs.len(),
        corpus.len(),
        train.len(),
        dev.len(),
        test.len(),
    ));
    builder.note(format!(
        "vocabularies: {} source ids ({} language tags), {} target ids",
        vocab_src.len(),
        specs.len(),
        vocab_tgt.len(),
    ));

    let lines = vec![
        format!(
            "generated {} pairs across {} languages ({} train / {} dev / {} test)",
            corpus.len(),
            specs.len(),
            train.len(),
            dev.len(),
            test.len(),
        ),
        format!("vocabularies: {} source / {} target ids", vocab_src.len(), vocab_tgt.len()),
    ];
    ctx.finish(builder, lines)
}

fn train_teacher(ctx: &StageContext) -> Result<StageOutcome> {
    ctx.reject_distill_section("trains on original targets")?;
    let setup = load_train_setup(
        ctx,
        ctx.train_path(layout::train_tsv(&ctx.out)),
        "run gen-data first",
        None,
    )?;
    let model_cfg = ctx.cfg.model.resolve(setup.vocab_src.len(), setup.vocab_tgt.len())?;
    let mut model = Model::build(&model_cfg, ctx.cfg.seed)?;
    let plan = DistillPlan::default();
    let opt = ctx.cfg.optimizer.apply(&desk_optimizer_defaults())?;
    let mut state = TrainState::new(&model, &plan, ctx.cfg.seed)?;
    let mut builder = ctx.manifest();
    let (_, lines) = run_training(
        ctx,
        &mut model,
        None,
        &setup,
        &plan,
        &opt,
        &ctx.cfg.schedule,
        &mut state,
        &mut builder,
    )?;
    ctx.finish(builder, lines)
}

fn distill_data(ctx: &StageContext) -> Result<StageOutcome> {
    let specs = ctx.load_specs()?;
    let (vocab_src, vocab_tgt) = ctx.load_vocabs()?;
    let teacher_path = ctx.teacher_ckpt_path();
    require_file(&teacher_path, "run train-teacher first")?;
    let (teacher, _, _) = load_checkpoint(&teacher_path)?;
    check_vocab_compat(&teacher, &vocab_src, &vocab_tgt, "the teacher checkpoint")?;

    let train_path = ctx.train_path(layout::train_tsv(&ctx.out));
    let train = ctx.read_corpus_required(&train_path, "run gen-data first")?;
    let unified = ensure_unified(&train, &specs)?;
    let beam = ctx.cfg.decode.beam.unwrap_or(DEFAULT_BEAM);
    let outcome = distill_corpus(&teacher, &unified, &vocab_src, &vocab_tgt, beam)?;
    if outcome.corpus.is_empty() {
        return Err(Error::Corpus(format!(
            "the teacher produced no usable translation for any of {} pairs",
            unified.len()
        )));
    }

    let distilled_path = layout::distilled_tsv(&ctx.out);
    let dropped_path = layout::dropped_log(&ctx.out);
    write_corpus(&distilled_path, &outcome.corpus)?;
    let mut dropped_text = outcome.dropped.join("\n");
    if !dropped_text.is_empty() {
        dropped_text.push('\n');
    }
    atomic_write(&dropped_path, dropped_text.as_bytes())?;

    let mut builder = ctx.manifest();
    builder.input(&teacher_path)?;
    builder.input(&train_path)?;
    builder.input(&ctx.languages_path())?;
    builder.input(&ctx.vocab_src_path())?;
    builder.input(&ctx.vocab_tgt_path())?;
    builder.output(&distilled_path)?;
    builder.output(&dropped_path)?;
    builder.note(format!(
        "beam {beam}: kept {} of {} pairs, dropped {}",
        outcome.corpus.len(),
        unified.len(),
        outcome.dropped.len(),
    ));

    let lines = vec![format!(
        "distilled {} of {} pairs with beam {beam} ({} dropped)",
        outcome.corpus.len(),
        unified.len(),
        outcome.dropped.len(),
    )];
    ctx.finish(builder, lines)
}

fn train_student(ctx: &StageContext) -> Result<StageOutcome> {
    let plan = ctx.cfg.distill.clone().unwrap_or_default();
    let setup = load_train_setup(
        ctx,
        ctx.train_path(layout::distilled_tsv(&ctx.out)),
        "run distill-data first (or point paths.train at the original corpus)",
        None,
    )?;
    let mut builder = ctx.manifest();
    let teacher = if plan.mode.requires_teacher() {
        let teacher_path = ctx.teacher_ckpt_path();
        require_file(&teacher_path, "run train-teacher first")?;
        let (teacher, _, _) = load_checkpoint(&teacher_path)?;
        check_vocab_compat(&teacher, &setup.vocab_src, &setup.vocab_tgt, "the teacher checkpoint")?;
        builder.input(&teacher_path)?;
        Some(teacher)
    } else {
        None
    };
    let model_cfg = ctx.cfg.model.resolve(setup.vocab_src.len(), setup.vocab_tgt.len())?;
    let mut model = Model::build(&model_cfg, ctx.cfg.seed)?;
    let opt = ctx.cfg.optimizer.apply(&desk_optimizer_defaults())?;
    let mut state = TrainState::new(&model, &plan, ctx.cfg.seed)?;
    builder.note(format!(
        "distillation mode {:?}, kd_weight {}, hard_ratio {}, temperature {}",
        plan.mode, plan.kd_weight, plan.hard_ratio, plan.temperature,
    ));
    let (_, lines) = run_training(
        ctx,
        &mut model,
        teacher.as_ref(),
        &setup,
        &plan,
        &opt,
        &ctx.cfg.schedule,
        &mut state,
        &mut builder,
    )?;
    ctx.finish(builder, lines)
}

fn hq_filter_stage(ctx: &StageContext) -> Result<StageOutcome> {
    let specs = ctx.load_specs()?;
    let distilled_path = ctx.distilled_path();
    let corpus = ctx.read_corpus_required(&distilled_path, "run distill-data first")?;
    let rescored = rescore_against_oracle(&corpus, &specs)?;
    let outcome = hq_filter(&rescored, &ctx.cfg.filter.policy())?;
    let kept = outcome.corpus.len();
    if kept == 0 {
        return Err(Error::Corpus(
            "the filter retained no pairs; loosen target_retention or k_per_language".into(),
        ));
    }
    let hq_path = layout::hq_tsv(&ctx.out);
    write_corpus(&hq_path, &outcome.corpus)?;

    let mut builder = ctx.manifest();
    builder.input(&distilled_path)?;
    builder.input(&ctx.languages_path())?;
    builder.output(&hq_path)?;
    builder.note(format!(
        "retained {kept} of {} pairs ({:.1}%)",
        corpus.len(),
        100.0 * kept as f64 / corpus.len() as f64,
    ));
    for (lang, k) in &outcome.realized_k {
        builder.note(format!("{lang}: similarity threshold {k:.4}"));
    }
    for w in &outcome.warnings {
        builder.note(format!("warning: {w}"));
    }

    let mut lines = vec![format!(
        "retained {kept} of {} pairs ({:.1}%) as high-quality",
        corpus.len(),
        100.0 * kept as f64 / corpus.len() as f64,
    )];
    lines.extend(outcome.warnings.iter().map(|w| format!("warning: {w}")));
    ctx.finish(builder, lines)
}

fn finetune_hq(ctx: &StageContext) -> Result<StageOutcome> {
    ctx.reject_distill_section("fine-tunes plain cross entropy on the filtered pairs")?;
    let hq_path = ctx.hq_path();
    let setup = load_train_setup(ctx, hq_path, "run hq-filter first", None)?;
    // The whole point of this stage is the curated subset; anything else in
    // the corpus means the wrong file was wired in.
    if let Some(bad) = setup_provenance_violation(&setup.train_corpus_path)? {
        return Err(Error::Precondition(format!(
            "{} holds {bad} pairs; finetune-hq expects the hq-filter output",
            setup.train_corpus_path.display()
        )));
    }

    let ckpt_path = ctx.checkpoint_path("student");
    require_file(&ckpt_path, "run train-student first")?;
    let (mut model, moments, start_step) = load_checkpoint(&ckpt_path)?;
    check_vocab_compat(&model, &setup.vocab_src, &setup.vocab_tgt, "the student checkpoint")?;

    let base_opt = ctx.cfg.optimizer.apply(&desk_optimizer_defaults())?;
    ctx.cfg.finetune.validate(base_opt.base_lr)?;
    let opt = OptimizerConfig { base_lr: ctx.cfg.finetune.lr, ..base_opt };
    let schedule =
        ScheduleSection { batch_tokens: ctx.cfg.finetune.batch_tokens, ..ctx.cfg.schedule.clone() };

    let plan = DistillPlan::default();
    let mut state = TrainState::new(&model, &plan, ctx.cfg.seed)?;
    state.step = start_step;
    if let Some(m) = moments {
        state.adam = m;
    }

    let mut builder = ctx.manifest();
    builder.input(&ckpt_path)?;
    builder.note(format!(
        "continued from update {start_step} at lr {} with batch {} tokens",
        opt.base_lr, schedule.batch_tokens,
    ));
    let (_, lines) =
        run_training(ctx, &mut model, None, &setup, &plan, &opt, &schedule, &mut state, &mut builder)?;
    ctx.finish(builder, lines)
}

/// Returns the provenance label of the first non-high-quality pair in a
/// corpus file, if any.
fn setup_provenance_violation(path: &Path) -> Result<Option<&'static str>> {
    let corpus = read_corpus(path)?;
    Ok(corpus
        .pairs
        .iter()
        .find(|p| p.provenance != Provenance::Hq)
        .map(|p| p.provenance.as_str()))
}

fn adapter_finetune(ctx: &StageContext) -> Result<StageOutcome> {
    ctx.reject_distill_section("fine-tunes adapters with plain cross entropy")?;
    let adapter = ctx.cfg.adapter.as_ref().expect("validated by StageConfig::validate");
    let specs = ctx.load_specs()?;
    let group_languages = resolve_group_languages(&specs, &adapter.group)?;
    let setup = load_train_setup(
        ctx,
        ctx.train_path(layout::distilled_tsv(&ctx.out)),
        "run distill-data first (or point paths.train at the original corpus)",
        Some(&group_languages),
    )?;

    let ckpt_path = ctx.checkpoint_path("student");
    require_file(&ckpt_path, "run train-student first")?;
    let (mut model, _, _) = load_checkpoint(&ckpt_path)?;
    check_vocab_compat(&model, &setup.vocab_src, &setup.vocab_tgt, "the base checkpoint")?;
    model.insert_adapters(&AdapterConfig {
        bottleneck: adapter.bottleneck,
        adapter_dropout: adapter.adapter_dropout,
        group: adapter.group.clone(),
    })?;
    let trainable: usize =
        model.params.iter().filter(|p| p.trainable).map(|p| p.data.len()).sum();

    let base_opt = ctx.cfg.optimizer.apply(&desk_optimizer_defaults())?;
    let opt = OptimizerConfig {
        base_lr: adapter.lr.unwrap_or(ctx.cfg.finetune.adapter_lr),
        warmup_steps: adapter.warmup.unwrap_or(ctx.cfg.finetune.adapter_warmup),
        dropout: adapter.adapter_dropout,
        ..base_opt
    };
    opt.validate()?;

    // Adapters start from scratch: fresh optimizer moments and step count,
    // so the warmup ramp applies to the new parameters.
    let plan = DistillPlan::default();
    let mut state = TrainState::new(&model, &plan, ctx.cfg.seed)?;

    let mut builder = ctx.manifest();
    builder.input(&ckpt_path)?;
    builder.note(format!(
        "group '{}' covers languages {group_languages:?}; bottleneck {}, {} trainable parameters",
        adapter.group, adapter.bottleneck, trainable,
    ));
    let (_, mut lines) =
        run_training(ctx, &mut model, None, &setup, &plan, &opt, &ctx.cfg.schedule, &mut state, &mut builder)?;
    lines.insert(
        0,
        format!(
            "adapter group '{}' ({} languages, {} trainable parameters)",
            adapter.group,
            group_languages.len(),
            trainable,
        ),
    );
    ctx.finish(builder, lines)
}

fn evaluate(ctx: &StageContext) -> Result<StageOutcome> {
    let specs = ctx.load_specs()?;
    let (vocab_src, vocab_tgt) = ctx.load_vocabs()?;
    let test_path = ctx.test_path();
    let test = ctx.read_corpus_required(&test_path, "run gen-data first")?;

    let ckpt_path = ctx.checkpoint_path(&ctx.name);
    require_file(&ckpt_path, "run the training stage that produces this checkpoint first")?;
    let ckpt_bytes = fs::read(&ckpt_path)?;
    let (mut model, _, _) = parse_checkpoint(&ckpt_bytes)?;
    check_vocab_compat(&model, &vocab_src, &vocab_tgt, "the evaluated checkpoint")?;
    match ctx.cfg.decode.adapter_group.as_deref() {
        None => {}
        Some("base") => model.set_active_adapter(None)?,
        Some(group) => model.set_active_adapter(Some(group))?,
    }

    // Latency columns come from a bench run when one is wired in; metric
    // evaluation itself never times anything.
    let bench_latency: Option<BTreeMap<String, f64>> = match &ctx.cfg.paths.bench_report {
        Some(path) => {
            require_file(path, "run bench first")?;
            let text = fs::read_to_string(path)?;
            let report: LatencyReport = serde_json::from_str(&text)
                .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            Some(report.per_language)
        }
        None => None,
    };

    let unified = ensure_unified(&test, &specs)?;
    let beam = ctx.cfg.decode.beam.unwrap_or(1);
    let length_penalty = ctx.cfg.decode.length_penalty.unwrap_or(1.0);
    let mut per_language = BTreeMap::new();
    for lang in unified.languages() {
        let pairs = unified.by_language(&lang);
        let mut hyps = Vec::with_capacity(pairs.len());
        let mut refs = Vec::with_capacity(pairs.len());
        for pair in &pairs {
            let src = vocab_src.encode_tokens(&pair.source);
            let budget = decode_budget(&model, src.len());
            let mut hyp = model.decode_beam(&src, None, beam, budget, length_penalty)?;
            if hyp.completed && hyp.tokens.last() == Some(&EOS) {
                hyp.tokens.pop();
            }
            hyps.push(vocab_tgt.decode_tokens(&hyp.tokens));
            refs.push(pair.target.clone());
        }
        let bleu = corpus_bleu(&hyps, &refs)?;
        let hyp_strings: Vec<String> = hyps.iter().map(|h| h.join(" ")).collect();
        let ref_strings: Vec<String> = refs.iter().map(|r| r.join(" ")).collect();
        let chrf = chrf_pp(&hyp_strings, &ref_strings)?;
        let latency_s = match &bench_latency {
            Some(map) => *map.get(&lang).ok_or_else(|| {
                Error::Precondition(format!(
                    "bench report has no entry for language '{lang}'; re-run bench on this testset"
                ))
            })?,
            None => 0.0,
        };
        per_language
            .insert(lang, LanguageEval { bleu, chrf, latency_s, n_sentences: pairs.len() });
    }

    let fingerprint = format!("ckpt:{}", &sha256_hex(&ckpt_bytes)[..16]);
    let report =
        EvalReport::new(&ctx.name, model.n_params() as u64, fingerprint, per_language)?;
    let json_path = layout::eval_json(&ctx.out, &ctx.name);
    let txt_path = layout::eval_txt(&ctx.out, &ctx.name);
    atomic_write(&json_path, report.to_json().as_bytes())?;
    let table = report.render_table();
    atomic_write(&txt_path, table.as_bytes())?;

    let mut builder = ctx.manifest();
    builder.input(&test_path)?;
    builder.input(&ctx.languages_path())?;
    builder.input(&ctx.vocab_src_path())?;
    builder.input(&ctx.vocab_tgt_path())?;
    builder.input(&ckpt_path)?;
    if let Some(path) = &ctx.cfg.paths.bench_report {
        builder.input(path)?;
    }
    builder.output(&json_path)?;
    builder.output(&txt_path)?;
    builder.note(format!(
        "beam {beam}: average BLEU {:.2}, chrF++ {:.2} over {} languages",
        report.averages.bleu,
        report.averages.chrf,
        report.per_language.len(),
    ));
    if bench_latency.is_none() {
        builder.note("latency columns are zero: no bench report wired in".to_string());
    }

    let lines = table.lines().map(str::to_string).collect();
    ctx.finish(builder, lines)
}

fn bench(ctx: &StageContext) -> Result<StageOutcome> {
    if deterministic_mode() {
        return Err(Error::Precondition(format!(
            "bench measures wall-clock latency, which cannot be reproduced byte for byte; \
             unset {DETERMINISTIC_ENV} to run it"
        )));
    }
    let specs = ctx.load_specs()?;
    let vocab_src_path = ctx.vocab_src_path();
    require_file(&vocab_src_path, "run gen-data first")?;
    let vocab_src = read_vocab(&vocab_src_path)?;
    let test_path = ctx.test_path();
    let test = ctx.read_corpus_required(&test_path, "run gen-data first")?;
    let ckpt_path = ctx.checkpoint_path(&ctx.name);
    require_file(&ckpt_path, "run the training stage that produces this checkpoint first")?;
    let (model, _, _) = load_checkpoint(&ckpt_path)?;
    if model.cfg.vocab_src != vocab_src.len() {
        return Err(Error::Precondition(format!(
            "the benched checkpoint expects a source vocabulary of {}, file provides {}",
            model.cfg.vocab_src,
            vocab_src.len(),
        )));
    }

    let unified = ensure_unified(&test, &specs)?;
    let report = benchmark_latency(
        &model,
        &unified,
        &vocab_src,
        ctx.cfg.bench.batch_size,
        ctx.cfg.bench.repeats,
    )?;
    let json_path = layout::bench_json(&ctx.out, &ctx.name);
    let json = serde_json::to_string_pretty(&report).expect("latency reports always serialize");
    atomic_write(&json_path, json.as_bytes())?;

    let mut builder = ctx.manifest();
    builder.input(&test_path)?;
    builder.input(&ctx.languages_path())?;
    builder.input(&vocab_src_path)?;
    builder.input(&ckpt_path)?;
    builder.output(&json_path)?;
    builder.note(format!(
        "median decode latency over {} repeats at batch {} ({})",
        report.repeats, report.batch_size, report.environment,
    ));
    builder.note("bench outputs carry timings and are exempt from byte-identical reruns");

    let mut lines = vec![format!(
        "median decode latency at batch {} over {} repeats:",
        report.batch_size, report.repeats
    )];
    for (lang, s) in &report.per_language {
        lines.push(format!("  {lang}: {s:.4} s"));
    }
    ctx.finish(builder, lines)
}

fn report(ctx: &StageContext) -> Result<StageOutcome> {
    let mut reports = Vec::new();
    for path in &ctx.cfg.paths.reports {
        require_file(path, "run evaluate first")?;
        let text = fs::read_to_string(path)?;
        reports.push(EvalReport::from_json(&text).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })?);
    }
    let mut seen = std::collections::BTreeSet::new();
    for r in &reports {
        if !seen.insert(&r.model_name) {
            return Err(Error::Precondition(format!(
                "two reports share the model name '{}'; rename one evaluation",
                r.model_name
            )));
        }
    }

    let table = render_comparison(&reports);
    let txt_path = layout::summary_txt(&ctx.out);
    let json_path = layout::summary_json(&ctx.out);
    atomic_write(&txt_path, table.as_bytes())?;
    let json = serde_json::to_string_pretty(&reports).expect("eval reports always serialize");
    atomic_write(&json_path, json.as_bytes())?;

    let mut builder = ctx.manifest();
    for path in &ctx.cfg.paths.reports {
        builder.input(path)?;
    }
    builder.output(&txt_path)?;
    builder.output(&json_path)?;
    builder.note(format!("compared {} models", reports.len()));

    let lines = table.lines().map(str::to_string).collect();
    ctx.finish(builder, lines)
}

/// Side-by-side comparison of several evaluations: one column per model,
/// one block per metric, languages as rows with an Avg footer.
fn render_comparison(reports: &[EvalReport]) -> String {
    let mut languages: Vec<String> = reports
        .iter()
        .flat_map(|r| r.per_language.keys().cloned())
        .collect();
    languages.sort();
    languages.dedup();

    let label_width = languages
        .iter()
        .map(|l| l.len())
        .chain(["language".len(), "params".len(), "Avg".len()])
        .max()
        .unwrap_or(8);
    let col_widths: Vec<usize> =
        reports.iter().map(|r| r.model_name.len().max(10)).collect();

    let mut out = String::new();
    out.push_str(&format!(
        "Model comparison: {} models, {} languages\n\n",
        reports.len(),
        languages.len(),
    ));

    out.push_str(&format!("{:<label_width$}", "language"));
    for (r, &w) in reports.iter().zip(&col_widths) {
        out.push_str(&format!("  {:>w$}", r.model_name));
    }
    out.push('\n');
    out.push_str(&format!("{:<label_width$}", "params"));
    for (r, &w) in reports.iter().zip(&col_widths) {
        out.push_str(&format!("  {:>w$}", r.param_count));
    }
    out.push('\n');

    type Cell = fn(&LanguageEval) -> f64;
    type Footer = fn(&EvalReport) -> f64;
    let blocks: [(&str, usize, Cell, Footer); 3] = [
        ("BLEU", 2, |e| e.bleu, |r| r.averages.bleu),
        ("chrF++", 2, |e| e.chrf, |r| r.averages.chrf),
        ("latency (s/batch)", 4, |e| e.latency_s, |r| r.averages.latency_s),
    ];
    for (title, decimals, cell, footer) in blocks {
        out.push('\n');
        out.push_str(title);
        out.push('\n');
        for lang in &languages {
            out.push_str(&format!("{lang:<label_width$}"));
            for (r, &w) in reports.iter().zip(&col_widths) {
                match r.per_language.get(lang) {
                    Some(e) => {
                        out.push_str(&format!("  {:>w$.decimals$}", cell(e)));
                    }
                    None => out.push_str(&format!("  {:>w$}", "-")),
                }
            }
            out.push('\n');
        }
        out.push_str(&format!("{:<label_width$}", "Avg"));
        for (r, &w) in reports.iter().zip(&col_widths) {
            out.push_str(&format!("  {:>w$.decimals$}", footer(r)));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::EvalAverages;

    fn fake_report(name: &str, params: u64, langs: &[(&str, f64, f64, f64)]) -> EvalReport {
        let per_language: BTreeMap<String, LanguageEval> = langs
            .iter()
            .map(|(l, bleu, chrf, lat)| {
                (
                    l.to_string(),
                    LanguageEval { bleu: *bleu, chrf: *chrf, latency_s: *lat, n_sentences: 5 },
                )
            })
            .collect();
        EvalReport::new(name, params, "ckpt:test", per_language).unwrap()
    }

    #[test]
    fn comparison_table_aligns_and_covers_all_languages() {
        let a = fake_report("teacher", 1_000_000, &[("aa", 40.0, 55.0, 0.5), ("bb", 30.0, 45.0, 0.6)]);
        let b = fake_report("student", 250_000, &[("aa", 38.0, 52.0, 0.2)]);
        let table = render_comparison(&[a, b]);
        assert!(table.contains("teacher"));
        assert!(table.contains("student"));
        assert!(table.contains("BLEU"));
        assert!(table.contains("chrF++"));
        // The language missing from the student shows a dash.
        let bb_row = table.lines().find(|l| l.starts_with("bb") && l.contains('-')).unwrap();
        assert!(bb_row.contains("30.00"));
        // Every non-empty line in a block shares the block's width.
        let lines: Vec<&str> = table.lines().filter(|l| !l.is_empty()).collect();
        let widths: Vec<usize> = lines.iter().skip(1).map(|l| l.len()).collect();
        let max = *widths.iter().max().unwrap();
        for (line, w) in lines.iter().skip(1).zip(&widths) {
            // Block titles are shorter; data rows all share the max width.
            assert!(*w == max || !line.contains("  "), "ragged row: {line:?}");
        }
        // Param row shows both counts.
        assert!(table.contains("1000000"));
        assert!(table.contains("250000"));
    }

    #[test]
    fn averages_row_present_per_block() {
        let a = fake_report("m", 10, &[("aa", 10.0, 20.0, 0.1), ("bb", 30.0, 40.0, 0.3)]);
        let table = render_comparison(&[a]);
        let avg_rows: Vec<&str> =
            table.lines().filter(|l| l.starts_with("Avg")).collect();
        assert_eq!(avg_rows.len(), 3);
        assert!(avg_rows[0].contains("20.00"), "{avg_rows:?}"); // mean BLEU
        assert!(avg_rows[1].contains("30.00")); // mean chrF
        assert!(avg_rows[2].contains("0.2000")); // mean latency
    }

    #[test]
    fn fake_report_roundtrips_via_summary_json() {
        let a = fake_report("m", 10, &[("aa", 10.0, 20.0, 0.1)]);
        let json = serde_json::to_string_pretty(&vec![a.clone()]).unwrap();
        let back: Vec<EvalReport> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, vec![a]);
        let _ = EvalAverages { bleu: 0.0, chrf: 0.0, latency_s: 0.0 };
    }
}
