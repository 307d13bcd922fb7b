//! Loss composition and one optimizer step per batch.
//!
//! Samples are processed one sentence at a time (no padding). The batch
//! objective is
//!
//!   (1−λ) · Σᵢ (nᵢ/N) · CEᵢ  +  λ/|S| · Σ_{i∈S} KLᵢ
//!
//! where CEᵢ and KLᵢ are per-sample token means, nᵢ the sample's token
//! count, N the batch token count, and S the selected sample set. The CE
//! part is the standard token-mean batch cross entropy; the KD part
//! averages per-sample KL means over the selected samples only, which
//! keeps its scale independent of the hard ratio. For plain modes λ = 0;
//! for WSLD S is the whole batch, so batch-level selection at r = 1 is
//! exactly WSLD. With a temperature τ both distributions are softened and
//! the KD term is rescaled by τ² as usual.

use std::collections::BTreeMap;

use crate::corpus::subword::{BOS, EOS, PAD};
use crate::distill::plan::{DistillMode, DistillPlan};
use crate::distill::queue::{
    select_hard_batch, select_hard_global, select_hard_language_wise, SelectionQueue,
};
use crate::error::{Error, Result};
use crate::model::forward::Binding;
use crate::model::params::Model;
use crate::numerics::kernels::softmax_rows;
use crate::numerics::losses::{kl_div, label_smoothed_ce, mean_nll};
use crate::numerics::optimizer::{adam_step, clip_grad_norm, AdamState, OptimizerConfig};

/// One training example in subword-id space: tagged source and raw target
/// (no begin/end markers; the step adds them).
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub language: String,
    pub src: Vec<usize>,
    pub target: Vec<usize>,
}

/// Mutable training-loop state: optimizer moments, completed step count,
/// and the selection queues for the global modes.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub adam: AdamState,
    pub queue: SelectionQueue,
    pub lang_queues: BTreeMap<String, SelectionQueue>,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: &Model, plan: &DistillPlan, seed: u64) -> Result<Self> {
        plan.validate()?;
        Ok(TrainState {
            step: 0,
            adam: AdamState::new(&model.params),
            queue: SelectionQueue::new(plan.queue_capacity.max(1), None)?,
            lang_queues: BTreeMap::new(),
            seed,
        })
    }
}

/// What one step did, for logging and tests.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub loss: f64,
    pub ce_term: f64,
    pub kd_term: f64,
    pub grad_norm: f64,
    pub selected: Vec<usize>,
    pub n_tokens: usize,
}

/// (1−λ)·label-smoothed CE + λ·KL(teacher ‖ student) on one stacked logit
/// block (value only). λ = 0 degenerates to plain sequence-level CE. Rows
/// whose target is the pad id are excluded from both terms.
pub fn wsld_loss(
    student_logits: &[f64],
    teacher_logits: &[f64],
    rows: usize,
    cols: usize,
    targets: &[usize],
    lambda: f64,
    label_smoothing: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let ce = label_smoothed_ce(student_logits, rows, cols, targets, PAD, label_smoothing)?;
    let valid: Vec<bool> = targets.iter().map(|&t| t != PAD).collect();
    let kl = kl_div(teacher_logits, student_logits, rows, cols, &valid)?;
    Ok((1.0 - lambda) * ce + lambda * kl)
}

fn teacher_forcing(sample: &TrainSample) -> (Vec<usize>, Vec<usize>) {
    let mut dec_in = Vec::with_capacity(sample.target.len() + 1);
    dec_in.push(BOS);
    dec_in.extend_from_slice(&sample.target);
    let mut gold = sample.target.clone();
    gold.push(EOS);
    (dec_in, gold)
}

/// Hardness pass: per-sample student mean NLL (inference mode), then the
/// plan's selection rule. Queue state advances for the global modes.
pub fn select_for_plan(
    student: &Model,
    batch: &[TrainSample],
    plan: &DistillPlan,
    state: &mut TrainState,
) -> Result<Vec<usize>> {
    match plan.mode {
        DistillMode::None | DistillMode::Sld => Ok(Vec::new()),
        DistillMode::Wsld => Ok((0..batch.len()).collect()),
        DistillMode::Bl | DistillMode::Gl | DistillMode::Glwd => {
            let mut losses = Vec::with_capacity(batch.len());
            for s in batch {
                let (dec_in, gold) = teacher_forcing(s);
                let logits = student.logits(&s.src, &dec_in)?;
                losses.push(mean_nll(&logits, gold.len(), student.cfg.vocab_tgt, &gold, PAD)?);
            }
            match plan.mode {
                DistillMode::Bl => select_hard_batch(&losses, plan.hard_ratio),
                DistillMode::Gl => select_hard_global(&mut state.queue, &losses, plan.hard_ratio),
                DistillMode::Glwd => {
                    let tagged: Vec<(String, f64)> = batch
                        .iter()
                        .zip(&losses)
                        .map(|(s, &l)| (s.language.clone(), l))
                        .collect();
                    select_hard_language_wise(
                        &mut state.lang_queues,
                        &tagged,
                        plan.hard_ratio,
                        plan.queue_capacity,
                    )
                }
                _ => unreachable!("outer match restricts to selective modes"),
            }
        }
    }
}

/// Forward/backward over one batch: composes the plan's loss with the
/// given selection, accumulates gradients into the student's parameter
/// store, and returns (total, CE term, KD term). No optimizer update.
pub fn accumulate_gradients(
    student: &mut Model,
    teacher: Option<&Model>,
    batch: &[TrainSample],
    plan: &DistillPlan,
    opt: &OptimizerConfig,
    selected: &[usize],
    seed: u64,
    step: u64,
) -> Result<(f64, f64, f64)> {
    let lambda = match plan.mode {
        DistillMode::None | DistillMode::Sld => 0.0,
        _ => plan.kd_weight,
    };
    let mut in_selection = vec![false; batch.len()];
    for &i in selected {
        if i >= batch.len() {
            return Err(Error::Precondition(format!("selected index {i} out of batch range")));
        }
        in_selection[i] = true;
    }
    let n_selected = selected.len();
    let lens: Vec<usize> = batch.iter().map(|s| s.target.len() + 1).collect();
    let n_tokens: usize = lens.iter().sum();
    let tau = plan.temperature;

    let mut total = 0.0;
    let mut ce_total = 0.0;
    let mut kd_total = 0.0;
    for (i, sample) in batch.iter().enumerate() {
        let (dec_in, gold) = teacher_forcing(sample);
        let rng = crate::rng::stream(seed, &format!("dropout/{step}/{i}"));
        let mut binding = Binding::training(student, opt.dropout, rng);
        let logits = binding.forward_logits(&sample.src, &dec_in)?;

        let w_ce = (1.0 - lambda) * lens[i] as f64 / n_tokens as f64;
        let ce = binding.tape.label_smoothed_ce(logits, &gold, PAD, opt.label_smoothing)?;
        let mut terms = vec![ce];
        let mut weights = vec![w_ce];

        if lambda > 0.0 && in_selection[i] {
            let t = teacher
                .ok_or_else(|| Error::Precondition("KD term requires a teacher".into()))?;
            let t_logits = t.logits(&sample.src, &dec_in)?;
            let softened: Vec<f64> = t_logits.iter().map(|x| x / tau).collect();
            let t_probs = softmax_rows(&softened, None, gold.len(), t.cfg.vocab_tgt);
            let st = if tau != 1.0 { binding.tape.scale(logits, 1.0 / tau)? } else { logits };
            let valid = vec![true; gold.len()];
            let kl = binding.tape.kl_from_teacher(st, &t_probs, &valid)?;
            let w_kl = lambda * tau * tau / n_selected as f64;
            kd_total += w_kl * binding.tape.value(kl).item();
            terms.push(kl);
            weights.push(w_kl);
        }

        ce_total += w_ce * binding.tape.value(ce).item();
        let sample_loss = binding.tape.weighted_sum(&terms, &weights)?;
        total += binding.tape.value(sample_loss).item();
        binding.tape.backward(sample_loss)?;
        let grads = binding.take_grads();
        student.accumulate_grads(grads);
    }
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("batch loss is {total}")));
    }
    Ok((total, ce_total, kd_total))
}

/// One full training step: selection, gradient accumulation, clipping, and
/// a bias-corrected Adam update at the schedule's next learning rate.
pub fn training_step(
    student: &mut Model,
    teacher: Option<&Model>,
    batch: &[TrainSample],
    plan: &DistillPlan,
    opt: &OptimizerConfig,
    state: &mut TrainState,
) -> Result<StepReport> {
    plan.validate()?;
    opt.validate()?;
    if batch.is_empty() {
        return Err(Error::Precondition("training_step needs a non-empty batch".into()));
    }
    if plan.mode.requires_teacher() && teacher.is_none() {
        return Err(Error::Precondition(format!(
            "distillation mode {:?} requires a teacher model",
            plan.mode
        )));
    }
    for (i, s) in batch.iter().enumerate() {
        if s.target.is_empty() {
            return Err(Error::Precondition(format!("sample {i} has an empty target")));
        }
        if s.src.is_empty() {
            return Err(Error::Precondition(format!("sample {i} has an empty source")));
        }
    }

    let selected = select_for_plan(student, batch, plan, state)?;
    let step = state.step + 1;
    student.zero_grads();
    let (loss, ce_term, kd_term) =
        accumulate_gradients(student, teacher, batch, plan, opt, &selected, state.seed, step)?;
    let grad_norm = clip_grad_norm(&mut student.params, opt.max_grad_norm)?;
    adam_step(&mut student.params, &mut state.adam, opt, step)?;
    state.step = step;
    let n_tokens = batch.iter().map(|s| s.target.len() + 1).sum();
    Ok(StepReport { loss, ce_term, kd_term, grad_norm, selected, n_tokens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;

    fn toy_model(seed: u64, vocab: usize) -> Model {
        let cfg = ModelConfig {
            d_model: 16,
            d_ff: 32,
            layers: 2,
            heads: 4,
            unique_layers: 2,
            vocab_src: vocab,
            vocab_tgt: vocab,
            max_positions: 32,
            pre_norm: true,
            embed_layernorm: true,
        };
        Model::build(&cfg, seed).unwrap()
    }

    fn toy_batch() -> Vec<TrainSample> {
        vec![
            TrainSample { language: "aa".into(), src: vec![4, 5, 6, 2], target: vec![5, 6] },
            TrainSample { language: "aa".into(), src: vec![4, 7, 2], target: vec![7, 8, 9] },
            TrainSample { language: "bb".into(), src: vec![4, 8, 9, 2], target: vec![6] },
        ]
    }

    fn quiet_opt() -> OptimizerConfig {
        OptimizerConfig { dropout: 0.0, ..OptimizerConfig::default() }
    }

    #[test]
    fn wsld_lambda_zero_is_pure_ce() {
        let logits = vec![0.1, 0.2, 0.3, -0.1, 0.4, 0.0, 0.2, 0.1];
        let teacher = vec![0.5, -0.5, 0.2, 0.1, 0.0, 0.3, -0.2, 0.4];
        let targets = [2, 3];
        let w = wsld_loss(&logits, &teacher, 2, 4, &targets, 0.0, 0.1).unwrap();
        let ce = label_smoothed_ce(&logits, 2, 4, &targets, PAD, 0.1).unwrap();
        assert_eq!(w, ce);
    }

    #[test]
    fn wsld_lambda_one_identical_logits_is_zero() {
        let logits = vec![0.7, -0.3, 0.1, 0.2, 0.5, -0.5, 0.0, 0.3];
        let targets = [1, 2];
        let w = wsld_loss(&logits, &logits, 2, 4, &targets, 1.0, 0.1).unwrap();
        assert!(w.abs() < 1e-12, "KL of identical distributions should vanish, got {w}");
    }

    #[test]
    fn wsld_half_matches_hand_mix() {
        // One-token toy case: λ=0.5 mixes CE and KL equally.
        let student = vec![1.0, 0.0, -1.0, 0.5];
        let teacher = vec![0.2, 0.4, -0.3, 0.9];
        let targets = [3];
        let ce = label_smoothed_ce(&student, 1, 4, &targets, PAD, 0.1).unwrap();
        let kl = kl_div(&teacher, &student, 1, 4, &[true]).unwrap();
        let w = wsld_loss(&student, &teacher, 1, 4, &targets, 0.5, 0.1).unwrap();
        assert!((w - (0.5 * ce + 0.5 * kl)).abs() < 1e-15);
    }

    #[test]
    fn wsld_shape_mismatch_is_error() {
        let logits = vec![0.0; 8];
        let teacher = vec![0.0; 4];
        assert!(wsld_loss(&logits, &teacher, 2, 4, &[1, 2], 0.5, 0.1).is_err());
    }

    #[test]
    fn none_mode_trains_without_teacher() {
        let mut student = toy_model(1, 12);
        let plan = DistillPlan::default();
        let opt = quiet_opt();
        let mut state = TrainState::new(&student, &plan, 7).unwrap();
        let before = student.params[0].data.clone();
        let report = training_step(&mut student, None, &toy_batch(), &plan, &opt, &mut state).unwrap();
        assert!(report.loss.is_finite() && report.loss > 0.0);
        assert_eq!(report.kd_term, 0.0);
        assert!(report.selected.is_empty());
        assert_eq!(state.step, 1);
        assert_ne!(student.params[0].data, before, "a step should move the embeddings");
    }

    #[test]
    fn teacher_required_for_kd_modes() {
        let mut student = toy_model(1, 12);
        let plan = DistillPlan { mode: DistillMode::Wsld, ..Default::default() };
        let opt = quiet_opt();
        let mut state = TrainState::new(&student, &plan, 7).unwrap();
        let err = training_step(&mut student, None, &toy_batch(), &plan, &opt, &mut state);
        assert!(err.is_err());
    }

    #[test]
    fn bl_full_ratio_equals_wsld_exactly() {
        let teacher = toy_model(2, 12);
        let opt = quiet_opt();
        let batch = toy_batch();

        let mut s1 = toy_model(1, 12);
        let plan_bl = DistillPlan { mode: DistillMode::Bl, hard_ratio: 1.0, ..Default::default() };
        let mut st1 = TrainState::new(&s1, &plan_bl, 7).unwrap();
        let r1 = training_step(&mut s1, Some(&teacher), &batch, &plan_bl, &opt, &mut st1).unwrap();

        let mut s2 = toy_model(1, 12);
        let plan_w = DistillPlan { mode: DistillMode::Wsld, ..Default::default() };
        let mut st2 = TrainState::new(&s2, &plan_w, 7).unwrap();
        let r2 = training_step(&mut s2, Some(&teacher), &batch, &plan_w, &opt, &mut st2).unwrap();

        assert_eq!(r1.selected, vec![0, 1, 2]);
        assert!((r1.loss - r2.loss).abs() < 1e-12, "{} vs {}", r1.loss, r2.loss);
        for (a, b) in s1.params.iter().zip(&s2.params) {
            assert_eq!(a.data, b.data, "parameter '{}' diverged between BL(r=1) and WSLD", a.name);
        }
    }

    #[test]
    fn sld_equals_none_on_same_batch() {
        // Same data, same seed: the two plain modes are the same computation.
        let opt = quiet_opt();
        let batch = toy_batch();
        let mut s1 = toy_model(3, 12);
        let plan_none = DistillPlan::default();
        let mut st1 = TrainState::new(&s1, &plan_none, 9).unwrap();
        let r1 = training_step(&mut s1, None, &batch, &plan_none, &opt, &mut st1).unwrap();

        let mut s2 = toy_model(3, 12);
        let plan_sld = DistillPlan { mode: DistillMode::Sld, ..Default::default() };
        let mut st2 = TrainState::new(&s2, &plan_sld, 9).unwrap();
        let r2 = training_step(&mut s2, None, &batch, &plan_sld, &opt, &mut st2).unwrap();

        assert_eq!(r1.loss, r2.loss);
        for (a, b) in s1.params.iter().zip(&s2.params) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn gl_warmup_then_selects() {
        let teacher = toy_model(2, 12);
        let mut student = toy_model(1, 12);
        let plan = DistillPlan {
            mode: DistillMode::Gl,
            queue_capacity: 8,
            hard_ratio: 0.5,
            ..Default::default()
        };
        let opt = quiet_opt();
        let mut state = TrainState::new(&student, &plan, 7).unwrap();
        let batch = toy_batch();
        let r1 =
            training_step(&mut student, Some(&teacher), &batch, &plan, &opt, &mut state).unwrap();
        assert!(r1.selected.is_empty(), "warm-up batch must select nothing");
        assert_eq!(state.queue.len(), batch.len());
        let r2 =
            training_step(&mut student, Some(&teacher), &batch, &plan, &opt, &mut state).unwrap();
        assert!(!r2.selected.is_empty(), "second pass should find hard samples");
        assert_eq!(state.step, 2);
    }

    #[test]
    fn glwd_keeps_per_language_queues() {
        let teacher = toy_model(2, 12);
        let mut student = toy_model(1, 12);
        let plan = DistillPlan {
            mode: DistillMode::Glwd,
            queue_capacity: 4,
            hard_ratio: 0.5,
            ..Default::default()
        };
        let opt = quiet_opt();
        let mut state = TrainState::new(&student, &plan, 7).unwrap();
        training_step(&mut student, Some(&teacher), &toy_batch(), &plan, &opt, &mut state).unwrap();
        assert_eq!(state.lang_queues.len(), 2);
        assert_eq!(state.lang_queues["aa"].len(), 2);
        assert_eq!(state.lang_queues["bb"].len(), 1);
    }

    #[test]
    fn teacher_receives_no_gradient() {
        let teacher = toy_model(2, 12);
        let mut student = toy_model(1, 12);
        let plan = DistillPlan { mode: DistillMode::Wsld, ..Default::default() };
        let opt = quiet_opt();
        let mut state = TrainState::new(&student, &plan, 7).unwrap();
        training_step(&mut student, Some(&teacher), &toy_batch(), &plan, &opt, &mut state).unwrap();
        for p in &teacher.params {
            assert!(p.grad.iter().all(|&g| g == 0.0), "teacher '{}' got a gradient", p.name);
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let mut student = toy_model(1, 12);
        let plan = DistillPlan::default();
        let opt = quiet_opt();
        let mut state = TrainState::new(&student, &plan, 7).unwrap();
        assert!(training_step(&mut student, None, &[], &plan, &opt, &mut state).is_err());
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let mut student = toy_model(4, 12);
            let plan = DistillPlan::default();
            let opt = OptimizerConfig::default(); // dropout on
            let mut state = TrainState::new(&student, &plan, 11).unwrap();
            let mut losses = Vec::new();
            for _ in 0..3 {
                let r = training_step(&mut student, None, &toy_batch(), &plan, &opt, &mut state)
                    .unwrap();
                losses.push(r.loss);
            }
            (losses, student.params[0].data.clone())
        };
        let (l1, p1) = run();
        let (l2, p2) = run();
        assert_eq!(l1, l2);
        assert_eq!(p1, p2);
    }
}
