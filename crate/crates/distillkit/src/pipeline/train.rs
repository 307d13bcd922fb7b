//! The training loop shared by every learning stage: deterministic epoch
//! order, token-budget batching, periodic dev evaluation with best-
//! checkpoint retention, early stopping, and divergence recovery.
//!
//! Checkpoint policy: `best.dkcp` holds the weights at the dev-BLEU peak
//! (strict improvement, so the first occurrence of the maximum wins, in
//! line with the early-stopping rule), `final.dkcp` the weights when the
//! loop ended. When a step diverges, `final.dkcp` receives the snapshot
//! from the last evaluation point instead and the loop reports the
//! divergence as an error, so a crashed run still leaves usable state.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::io::atomic_write;
use crate::corpus::subword::{Vocab, EOS};
use crate::corpus::types::Corpus;
use crate::distill::{decode_budget, training_step, DistillPlan, TrainSample, TrainState};
use crate::error::{Error, Result};
use crate::metrics::{corpus_bleu, early_stop};
use crate::model::checkpoint_bytes;
use crate::model::params::Model;
use crate::numerics::optimizer::OptimizerConfig;
use crate::pipeline::config::ScheduleSection;
use crate::rng::stream;

/// Group an ordered walk over `samples` into batches of roughly
/// `batch_tokens` target tokens (a sample costs its target length plus the
/// end marker). A batch closes when the next sample would push it over the
/// budget; an oversized sample travels alone rather than being dropped.
pub fn token_batches(
    samples: &[TrainSample],
    order: &[usize],
    batch_tokens: usize,
) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_tokens = 0usize;
    for &i in order {
        let cost = samples[i].target.len() + 1;
        if !current.is_empty() && current_tokens + cost > batch_tokens {
            batches.push(std::mem::take(&mut current));
            current_tokens = 0;
        }
        current.push(i);
        current_tokens += cost;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Dev set in decode-ready form: tagged source ids (the decoder appends
/// the end marker itself) and reference token sequences.
#[derive(Debug, Clone)]
pub struct DevSet {
    pub srcs: Vec<Vec<usize>>,
    pub refs: Vec<Vec<String>>,
}

impl DevSet {
    /// Build from a unified-script corpus.
    pub fn from_corpus(unified: &Corpus, vocab_src: &Vocab) -> Self {
        let mut srcs = Vec::with_capacity(unified.pairs.len());
        let mut refs = Vec::with_capacity(unified.pairs.len());
        for p in &unified.pairs {
            srcs.push(vocab_src.encode_tokens(&p.source));
            refs.push(p.target.clone());
        }
        DevSet { srcs, refs }
    }

    pub fn len(&self) -> usize {
        self.srcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.srcs.is_empty()
    }
}

/// Decode every dev source and score the hypotheses against the
/// references.
pub fn dev_bleu(
    model: &Model,
    dev: &DevSet,
    vocab_tgt: &Vocab,
    beam: usize,
    length_penalty: f64,
) -> Result<f64> {
    let mut hyps = Vec::with_capacity(dev.srcs.len());
    for src in &dev.srcs {
        let budget = decode_budget(model, src.len());
        let mut hyp = model.decode_beam(src, None, beam, budget, length_penalty)?;
        if hyp.completed && hyp.tokens.last() == Some(&EOS) {
            hyp.tokens.pop();
        }
        hyps.push(vocab_tgt.decode_tokens(&hyp.tokens));
    }
    corpus_bleu(&hyps, &dev.refs)
}

/// One dev evaluation during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub dev_bleu: f64,
}

/// What a finished (or recovered) training run looked like.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Update count when the loop stopped.
    pub final_step: u64,
    /// Update count of the best checkpoint (0 when never evaluated).
    pub best_step: u64,
    /// Best dev BLEU seen, absent when the dev set was never scored.
    pub best_dev_bleu: Option<f64>,
    pub history: Vec<EvalPoint>,
    pub stopped_early: bool,
}

/// Run up to `schedule.max_updates` optimizer steps (counting from the
/// state's current step, so fine-tuning continues an earlier count).
/// Evaluates every `eval_interval` updates and always at the last one;
/// writes `best.dkcp` and `final.dkcp` under `ckpt_dir`.
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    student: &mut Model,
    teacher: Option<&Model>,
    samples: &[TrainSample],
    dev: &DevSet,
    vocab_tgt: &Vocab,
    plan: &DistillPlan,
    opt: &OptimizerConfig,
    schedule: &ScheduleSection,
    state: &mut TrainState,
    ckpt_dir: &Path,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    if samples.is_empty() {
        return Err(Error::Precondition("training corpus is empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::Precondition("dev set is empty".into()));
    }

    let start_step = state.step;
    let target_step = start_step + schedule.max_updates;
    let best_path = ckpt_dir.join("best.dkcp");
    let final_path = ckpt_dir.join("final.dkcp");

    // The pre-training weights are the fallback for both checkpoints: a
    // zero-update budget leaves them in place, and a dive before the first
    // evaluation recovers to them.
    let mut snapshot = checkpoint_bytes(student, Some(&state.adam), state.step)?;
    atomic_write(&best_path, &snapshot)?;

    let mut history: Vec<EvalPoint> = Vec::new();
    let mut best: Option<EvalPoint> = None;
    let mut stopped_early = false;
    let mut epoch = 0u64;

    'epochs: loop {
        if state.step >= target_step {
            break;
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut stream(state.seed, &format!("epoch/{epoch}")));
        epoch += 1;
        for batch_idx in token_batches(samples, &order, schedule.batch_tokens) {
            if state.step >= target_step {
                break;
            }
            let batch: Vec<TrainSample> =
                batch_idx.iter().map(|&i| samples[i].clone()).collect();
            match training_step(student, teacher, &batch, plan, opt, state) {
                Ok(_) => {}
                Err(Error::NonFinite(msg)) | Err(Error::Divergence(msg)) => {
                    atomic_write(&final_path, &snapshot)?;
                    return Err(Error::Divergence(format!(
                        "training diverged at update {}: {msg}; last good state from update {} \
                         kept as final checkpoint",
                        state.step + 1,
                        parse_snapshot_step(&snapshot),
                    )));
                }
                Err(e) => return Err(e),
            }

            let due = state.step % schedule.eval_interval == 0 || state.step == target_step;
            if !due {
                continue;
            }
            let score = dev_bleu(student, dev, vocab_tgt, schedule.dev_beam, 1.0)?;
            history.push(EvalPoint { step: state.step, dev_bleu: score });
            snapshot = checkpoint_bytes(student, Some(&state.adam), state.step)?;
            let improved = best.as_ref().map_or(true, |b| score > b.dev_bleu);
            if improved {
                best = Some(EvalPoint { step: state.step, dev_bleu: score });
                atomic_write(&best_path, &snapshot)?;
            }
            let curve: Vec<f64> = history.iter().map(|p| p.dev_bleu).collect();
            if early_stop(&curve, schedule.patience) {
                stopped_early = true;
                break 'epochs;
            }
        }
    }

    let final_bytes = checkpoint_bytes(student, Some(&state.adam), state.step)?;
    atomic_write(&final_path, &final_bytes)?;
    Ok(TrainOutcome {
        final_step: state.step,
        best_step: best.as_ref().map_or(start_step, |b| b.step),
        best_dev_bleu: best.map(|b| b.dev_bleu),
        history,
        stopped_early,
    })
}

/// Step counter stored in a serialized checkpoint (for the divergence
/// message; tolerates nothing because the bytes came from this process).
fn parse_snapshot_step(bytes: &[u8]) -> u64 {
    crate::model::parse_checkpoint(bytes).map(|(_, _, step)| step).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::DistillMode;
    use crate::model::config::ModelConfig;
    use crate::model::load_checkpoint;

    fn tiny_model(seed: u64) -> Model {
        // Vocabulary sizes match tiny_vocab's 11 ids exactly, so any id the
        // decoder emits can be turned back into a token.
        let cfg = ModelConfig {
            d_model: 16,
            d_ff: 32,
            layers: 1,
            heads: 2,
            unique_layers: 1,
            vocab_src: 11,
            vocab_tgt: 11,
            max_positions: 32,
            pre_norm: true,
            embed_layernorm: true,
        };
        Model::build(&cfg, seed).unwrap()
    }

    fn copy_task_samples(n: usize) -> Vec<TrainSample> {
        // Every sample shares one 4-token target (long enough to carry
        // 4-grams, so BLEU can leave zero), with varying sources. A few
        // dozen updates suffice for greedy decoding to lock onto it.
        // Id 4 is the language tag, 5..11 the subwords w0..w5.
        (0..n)
            .map(|i| {
                let a = 5 + (i % 6);
                let b = 5 + ((i + 3) % 6);
                TrainSample {
                    language: "aa".into(),
                    src: vec![4, a, b, EOS],
                    target: vec![5, 6, 7, 8],
                }
            })
            .collect()
    }

    fn word(i: usize) -> String {
        format!("w{i}")
    }

    fn tiny_vocab() -> Vocab {
        let subwords: Vec<String> = (0..6)
            .map(|i| format!("{}{}", word(i), crate::corpus::subword::WORD_END))
            .collect();
        Vocab::new(&["<aa>".to_string()], subwords).unwrap()
    }

    fn dev_from_samples(samples: &[TrainSample]) -> DevSet {
        let srcs = samples.iter().map(|s| s.src[..s.src.len() - 1].to_vec()).collect();
        let refs = samples
            .iter()
            .map(|s| s.target.iter().map(|&t| word(t - 5)).collect())
            .collect();
        DevSet { srcs, refs }
    }

    fn plain_plan() -> DistillPlan {
        DistillPlan { mode: DistillMode::None, ..Default::default() }
    }

    fn fast_schedule(max_updates: u64, eval_interval: u64) -> ScheduleSection {
        ScheduleSection {
            max_updates,
            eval_interval,
            batch_tokens: 12,
            patience: 50,
            dev_beam: 1,
        }
    }

    fn quiet_opt() -> OptimizerConfig {
        OptimizerConfig { dropout: 0.0, warmup_steps: 4, ..OptimizerConfig::default() }
    }

    #[test]
    fn batches_respect_token_budget() {
        let samples: Vec<TrainSample> = [2usize, 3, 1, 4, 2]
            .iter()
            .map(|&n| TrainSample {
                language: "aa".into(),
                src: vec![4, EOS],
                target: vec![5; n],
            })
            .collect();
        let order: Vec<usize> = (0..samples.len()).collect();
        // Costs are target+1: 3, 4, 2, 5, 3.
        let batches = token_batches(&samples, &order, 7);
        assert_eq!(batches, vec![vec![0, 1], vec![2, 3], vec![4]]);
        // Budget smaller than any sample: one batch each, nothing dropped.
        let batches = token_batches(&samples, &order, 1);
        assert_eq!(batches.len(), samples.len());
        // Order is honored.
        let batches = token_batches(&samples, &[4, 3, 2, 1, 0], 100);
        assert_eq!(batches, vec![vec![4, 3, 2, 1, 0]]);
    }

    #[test]
    fn zero_budget_run_keeps_initial_weights() {
        let mut model = tiny_model(3);
        let before = checkpoint_bytes(&model, None, 0).unwrap();
        let samples = copy_task_samples(8);
        let dev = dev_from_samples(&samples);
        let vocab = tiny_vocab();
        let plan = plain_plan();
        let mut state = TrainState::new(&model, &plan, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = train_loop(
            &mut model,
            None,
            &samples,
            &dev,
            &vocab,
            &plan,
            &quiet_opt(),
            &fast_schedule(0, 5),
            &mut state,
            dir.path(),
        )
        .unwrap();
        assert_eq!(out.final_step, 0);
        assert_eq!(out.best_step, 0);
        assert!(out.history.is_empty() && out.best_dev_bleu.is_none());
        for name in ["best.dkcp", "final.dkcp"] {
            let (m, _, step) = load_checkpoint(&dir.path().join(name)).unwrap();
            assert_eq!(step, 0);
            assert_eq!(checkpoint_bytes(&m, None, 0).unwrap(), before, "{name} drifted");
        }
    }

    #[test]
    fn history_follows_eval_cadence_and_best_tracks_peak() {
        let mut model = tiny_model(3);
        let samples = copy_task_samples(8);
        let dev = dev_from_samples(&samples);
        let vocab = tiny_vocab();
        let plan = plain_plan();
        let mut state = TrainState::new(&model, &plan, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = train_loop(
            &mut model,
            None,
            &samples,
            &dev,
            &vocab,
            &plan,
            &quiet_opt(),
            &fast_schedule(7, 3),
            &mut state,
            dir.path(),
        )
        .unwrap();
        assert_eq!(out.final_step, 7);
        // Evaluations at 3, 6, and the forced final step 7.
        let steps: Vec<u64> = out.history.iter().map(|p| p.step).collect();
        assert_eq!(steps, vec![3, 6, 7]);
        let best = out.best_dev_bleu.unwrap();
        let max = out.history.iter().map(|p| p.dev_bleu).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best, max);
        // First occurrence of the max wins.
        let first_peak =
            out.history.iter().find(|p| p.dev_bleu == max).map(|p| p.step).unwrap();
        assert_eq!(out.best_step, first_peak);
        // Best checkpoint scores exactly its recorded dev BLEU.
        let (best_model, _, best_step) =
            load_checkpoint(&dir.path().join("best.dkcp")).unwrap();
        assert_eq!(best_step, out.best_step);
        let rescored = dev_bleu(&best_model, &dev, &vocab, 1, 1.0).unwrap();
        assert_eq!(rescored, best);
        // Final checkpoint carries the last step.
        let (_, _, final_step) = load_checkpoint(&dir.path().join("final.dkcp")).unwrap();
        assert_eq!(final_step, 7);
    }

    #[test]
    fn learning_improves_dev_bleu_on_copy_task() {
        let mut model = tiny_model(3);
        let samples = copy_task_samples(12);
        let dev = dev_from_samples(&samples);
        let vocab = tiny_vocab();
        let plan = plain_plan();
        let mut state = TrainState::new(&model, &plan, 5).unwrap();
        let before = dev_bleu(&model, &dev, &vocab, 1, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = train_loop(
            &mut model,
            None,
            &samples,
            &dev,
            &vocab,
            &plan,
            &quiet_opt(),
            &fast_schedule(60, 20),
            &mut state,
            dir.path(),
        )
        .unwrap();
        assert!(
            out.best_dev_bleu.unwrap() > before,
            "no improvement: {before} -> {:?}",
            out.best_dev_bleu
        );
    }

    #[test]
    fn impatient_schedule_stops_at_first_non_improvement() {
        let mut model = tiny_model(3);
        let samples = copy_task_samples(8);
        let dev = dev_from_samples(&samples);
        let vocab = tiny_vocab();
        let plan = plain_plan();
        let mut state = TrainState::new(&model, &plan, 5).unwrap();
        let schedule = ScheduleSection { patience: 0, ..fast_schedule(400, 1) };
        let dir = tempfile::tempdir().unwrap();
        let out = train_loop(
            &mut model,
            None,
            &samples,
            &dev,
            &vocab,
            &plan,
            &quiet_opt(),
            &schedule,
            &mut state,
            dir.path(),
        )
        .unwrap();
        // With patience 0, the loop ends the moment an evaluation fails to
        // set a new best; dev BLEU cannot improve 400 times in a row here.
        assert!(out.stopped_early);
        assert!(out.final_step < 400);
        let n = out.history.len();
        assert!(out.history[n - 1].dev_bleu <= out.history[..n - 1]
            .iter()
            .map(|p| p.dev_bleu)
            .fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn divergence_recovers_last_good_snapshot() {
        let mut model = tiny_model(3);
        let samples = copy_task_samples(8);
        let dev = dev_from_samples(&samples);
        let vocab = tiny_vocab();
        let plan = plain_plan();
        let mut state = TrainState::new(&model, &plan, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        // Run 3 clean updates (evaluating each) to set a snapshot...
        train_loop(
            &mut model,
            None,
            &samples,
            &dev,
            &vocab,
            &plan,
            &quiet_opt(),
            &fast_schedule(3, 1),
            &mut state,
            dir.path(),
        )
        .unwrap();
        // ...then poison the output projection so logits span a range no
        // finite cross entropy survives (label smoothing puts weight on
        // every class, including the ones driven to -inf log-probability).
        let out_w = model.params.iter_mut().find(|p| p.name == "out_proj.w").unwrap();
        for (i, x) in out_w.data.iter_mut().enumerate() {
            *x = if i % 2 == 0 { 1e308 } else { -1e308 };
        }
        let err = train_loop(
            &mut model,
            None,
            &samples,
            &dev,
            &vocab,
            &plan,
            &quiet_opt(),
            &fast_schedule(3, 1),
            &mut state,
            dir.path(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divergence(_)), "got {err:?}");
        assert_eq!(err.exit_code(), 3);
        // final.dkcp is the pre-divergence snapshot: loadable, finite, and
        // from the poisoned run's starting step.
        let (recovered, _, step) = load_checkpoint(&dir.path().join("final.dkcp")).unwrap();
        assert_eq!(step, 3);
        assert!(recovered.params.iter().all(|p| p.data.iter().all(|x| x.is_finite())));
    }

    #[test]
    fn identical_seeds_reproduce_the_run_byte_for_byte() {
        let run = || {
            let mut model = tiny_model(3);
            let samples = copy_task_samples(8);
            let dev = dev_from_samples(&samples);
            let vocab = tiny_vocab();
            let plan = plain_plan();
            let opt = OptimizerConfig { warmup_steps: 4, ..OptimizerConfig::default() };
            let mut state = TrainState::new(&model, &plan, 5).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let out = train_loop(
                &mut model,
                None,
                &samples,
                &dev,
                &vocab,
                &plan,
                &opt,
                &fast_schedule(6, 3),
                &mut state,
                dir.path(),
            )
            .unwrap();
            (std::fs::read(dir.path().join("best.dkcp")).unwrap(), out)
        };
        let (bytes_a, out_a) = run();
        let (bytes_b, out_b) = run();
        assert_eq!(bytes_a, bytes_b);
        assert_eq!(out_a, out_b);
    }
}
