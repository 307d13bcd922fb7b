//! Shared fixtures and independently implemented oracles for the
//! integration suite.
//!
//! Everything here is test-side machinery: the oracles re-derive expected
//! behaviour from first principles (exhaustive enumeration, brute-force
//! scans, finite differences) instead of calling back into the code paths
//! they are meant to check. Where an oracle must share a published formula
//! with the library (rank cutoffs, F-beta assembly), the formula is
//! restated here literally and the surrounding mechanics (counting,
//! sorting, queue bookkeeping) are reimplemented differently.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use distillkit::corpus::subword::{BOS, EOS, PAD};
use distillkit::corpus::{LanguageSpec, ReorderRule, Vocab};
use distillkit::distill::{accumulate_gradients, DistillPlan, TrainSample};
use distillkit::model::{Model, ModelConfig};
use distillkit::numerics::optimizer::OptimizerConfig;
use distillkit::pipeline::config::ScheduleSection;

// ---------------------------------------------------------------------
// Deterministic test randomness
// ---------------------------------------------------------------------

/// Seeded RNG for test-side sampling, independent of the crate's streams.
pub fn trng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------
// Small models
// ---------------------------------------------------------------------

/// Structurally complete toy configuration: multiple heads, distinct
/// unique-vs-total layer counts never collapse to trivial cases.
pub fn tiny_config(vocab_src: usize, vocab_tgt: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        d_ff: 32,
        layers: 2,
        heads: 4,
        unique_layers: 2,
        vocab_src,
        vocab_tgt,
        max_positions: 32,
        pre_norm: true,
        embed_layernorm: true,
    }
}

pub fn tiny_model(vocab_src: usize, vocab_tgt: usize, seed: u64) -> Model {
    Model::build(&tiny_config(vocab_src, vocab_tgt), seed).expect("tiny model builds")
}

// ---------------------------------------------------------------------
// Decode oracle: exhaustive enumeration
// ---------------------------------------------------------------------

/// Numerically stable log-softmax, reimplemented here so the decode oracle
/// does not lean on the crate's kernels.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
    let lz = m + z.ln();
    row.iter().map(|&x| x - lz).collect()
}

/// Next-token log-probabilities for a decoded prefix, from raw logits.
fn oracle_next_logprobs(model: &Model, src_full: &[usize], prefix: &[usize]) -> Vec<f64> {
    let mut dec_in = Vec::with_capacity(prefix.len() + 1);
    dec_in.push(BOS);
    dec_in.extend_from_slice(prefix);
    let logits = model.logits(src_full, &dec_in).expect("oracle forward");
    let v = model.cfg.vocab_tgt;
    let last = &logits[(dec_in.len() - 1) * v..dec_in.len() * v];
    log_softmax_row(last)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleHypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub completed: bool,
}

/// Brute-force reference for beam search: walk every sequence of non-pad,
/// non-bos tokens up to `max_len`, considering the end-of-sequence token at
/// every position. If any completion exists its length-normalized best
/// wins; otherwise the best full-length partial does, ties broken toward
/// the lexicographically smaller token sequence (the decoder's documented
/// rule). Exponential in `max_len`; keep vocabularies and budgets tiny.
pub fn exhaustive_decode(
    model: &Model,
    src_ids: &[usize],
    lang_tag: Option<usize>,
    max_len: usize,
    length_penalty: f64,
) -> OracleHypothesis {
    let mut src_full = Vec::with_capacity(src_ids.len() + 2);
    if let Some(t) = lang_tag {
        src_full.push(t);
    }
    src_full.extend_from_slice(src_ids);
    src_full.push(EOS);

    let continuations: Vec<usize> = (0..model.cfg.vocab_tgt)
        .filter(|&t| t != PAD && t != BOS && t != EOS)
        .collect();

    struct Search<'m> {
        model: &'m Model,
        src_full: Vec<usize>,
        continuations: Vec<usize>,
        max_len: usize,
        alpha: f64,
        best_completed: Option<OracleHypothesis>,
        best_partial: Option<OracleHypothesis>,
    }

    impl Search<'_> {
        fn visit(&mut self, prefix: &mut Vec<usize>, logp: f64) {
            if prefix.len() == self.max_len {
                let score = logp / (prefix.len() as f64).powf(self.alpha);
                let better = match &self.best_partial {
                    None => true,
                    Some(b) => {
                        score > b.score || (score == b.score && prefix.as_slice() < &b.tokens[..])
                    }
                };
                if better {
                    self.best_partial = Some(OracleHypothesis {
                        tokens: prefix.clone(),
                        score,
                        completed: false,
                    });
                }
                return;
            }
            let lp = oracle_next_logprobs(self.model, &self.src_full, prefix);
            let mut ended = prefix.clone();
            ended.push(EOS);
            let score = (logp + lp[EOS]) / (ended.len() as f64).powf(self.alpha);
            let better = match &self.best_completed {
                None => true,
                Some(b) => score > b.score,
            };
            if better {
                self.best_completed =
                    Some(OracleHypothesis { tokens: ended, score, completed: true });
            }
            for i in 0..self.continuations.len() {
                let t = self.continuations[i];
                prefix.push(t);
                self.visit(prefix, logp + lp[t]);
                prefix.pop();
            }
        }
    }

    let mut search = Search {
        model,
        src_full,
        continuations,
        max_len,
        alpha: length_penalty,
        best_completed: None,
        best_partial: None,
    };
    search.visit(&mut Vec::new(), 0.0);
    search
        .best_completed
        .or(search.best_partial)
        .expect("max_len >= 1 guarantees at least one candidate")
}

/// Beam width guaranteeing the search above and `decode_beam` coincide:
/// wide enough that no candidate, end-of-sequence expansions included, is
/// ever cut at any step.
pub fn exhaustive_beam_width(model: &Model, max_len: usize) -> usize {
    let non_eos = model.cfg.vocab_tgt.saturating_sub(3); // minus pad, bos, eos
    let cands = non_eos + 1;
    // Live partials after t steps: non_eos^t; candidates at step t+1:
    // non_eos^t * cands. The widest front is the last step.
    let mut live = 1usize;
    for _ in 1..max_len {
        live *= non_eos;
    }
    live * cands
}

// ---------------------------------------------------------------------
// chrF++ oracle: positional scan with greedy multiset matching
// ---------------------------------------------------------------------

/// Exhaustive chrF++ reference. N-grams are enumerated by start position
/// and matched greedily against a removable copy of the reference's grams
/// (an O(n^2) multiset intersection — per occurrence, not per distinct
/// gram). The skip/zero conventions and the F-beta assembly mirror the
/// documented metric exactly.
pub fn chrf_pp_oracle(hyps: &[String], refs: &[String]) -> f64 {
    const CHAR_N: usize = 6;
    const WORD_N: usize = 2;
    const ORDERS: usize = CHAR_N + WORD_N;
    let beta = 2.0f64;

    fn grams<T: Clone + PartialEq>(units: &[T], n: usize) -> Vec<Vec<T>> {
        if units.len() < n {
            return Vec::new();
        }
        (0..=units.len() - n).map(|i| units[i..i + n].to_vec()).collect()
    }

    fn tally<T: Clone + PartialEq>(hyp: &[T], reference: &[T], n: usize) -> (u64, u64, u64) {
        let hyp_grams = grams(hyp, n);
        let mut remaining = grams(reference, n);
        let (hyp_total, ref_total) = (hyp_grams.len() as u64, remaining.len() as u64);
        let mut matched = 0u64;
        for g in &hyp_grams {
            if let Some(pos) = remaining.iter().position(|r| r == g) {
                remaining.swap_remove(pos);
                matched += 1;
            }
        }
        (matched, hyp_total, ref_total)
    }

    let mut matches = [0u64; ORDERS];
    let mut hyp_totals = [0u64; ORDERS];
    let mut ref_totals = [0u64; ORDERS];
    for (h, r) in hyps.iter().zip(refs) {
        let hyp_chars: Vec<char> = h.chars().filter(|c| !c.is_whitespace()).collect();
        let ref_chars: Vec<char> = r.chars().filter(|c| !c.is_whitespace()).collect();
        assert!(!ref_chars.is_empty(), "oracle inputs must have non-empty references");
        for n in 1..=CHAR_N {
            let (m, ht, rt) = tally(&hyp_chars, &ref_chars, n);
            matches[n - 1] += m;
            hyp_totals[n - 1] += ht;
            ref_totals[n - 1] += rt;
        }
        let hyp_words: Vec<&str> = h.split_whitespace().collect();
        let ref_words: Vec<&str> = r.split_whitespace().collect();
        for n in 1..=WORD_N {
            let (m, ht, rt) = tally(&hyp_words, &ref_words, n);
            matches[CHAR_N + n - 1] += m;
            hyp_totals[CHAR_N + n - 1] += ht;
            ref_totals[CHAR_N + n - 1] += rt;
        }
    }

    let mut sum = 0.0;
    let mut live = 0usize;
    for i in 0..ORDERS {
        if hyp_totals[i] == 0 && ref_totals[i] == 0 {
            continue; // unrealized on both sides: skipped, not zeroed
        }
        let precision =
            if hyp_totals[i] > 0 { matches[i] as f64 / hyp_totals[i] as f64 } else { 0.0 };
        let recall =
            if ref_totals[i] > 0 { matches[i] as f64 / ref_totals[i] as f64 } else { 0.0 };
        let denom = beta * beta * precision + recall;
        let f = if denom == 0.0 { 0.0 } else { (1.0 + beta * beta) * precision * recall / denom };
        sum += f;
        live += 1;
    }
    100.0 * sum / live as f64
}

// ---------------------------------------------------------------------
// Selection oracles: repeated scans and a Vec-backed queue model
// ---------------------------------------------------------------------

/// Sort-free reference for batch-level selection: repeatedly scan for the
/// running maximum (strict comparison keeps the earliest index on ties)
/// and mark it, k = ceil(r*n - 1e-9) clamped to [1, n].
pub fn bl_oracle(losses: &[f64], r: f64) -> Vec<usize> {
    let n = losses.len();
    if n == 0 {
        return Vec::new();
    }
    let k = ((((r * n as f64) - 1e-9).ceil()).max(1.0) as usize).min(n);
    let mut taken = vec![false; n];
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &l) in losses.iter().enumerate() {
            if taken[i] {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(b) if l > losses[b] => best = Some(i),
                _ => {}
            }
        }
        taken[best.expect("k <= n")] = true;
    }
    (0..n).filter(|&i| taken[i]).collect()
}

/// Replayable reference model of a loss queue: a plain Vec where pushing
/// at capacity drops the front element, plus the nearest-rank quantile
/// threshold computed via a hand-rolled insertion sort.
#[derive(Debug, Clone)]
pub struct QueueModel {
    pub capacity: usize,
    pub items: Vec<f64>,
}

impl QueueModel {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        QueueModel { capacity, items: Vec::new() }
    }

    pub fn push(&mut self, x: f64) {
        if self.items.len() == self.capacity {
            self.items.remove(0);
        }
        self.items.push(x);
    }

    /// Nearest-rank (1-r)-quantile of the stored losses; `None` encodes
    /// rank zero, the everything-is-hard limit.
    pub fn threshold(&self, r: f64) -> Option<f64> {
        let n = self.items.len();
        assert!(n > 0, "threshold of an empty queue model");
        let rank = (((1.0 - r) * n as f64) - 1e-9).ceil().max(0.0) as usize;
        if rank == 0 {
            return None;
        }
        let mut sorted = self.items.clone();
        for i in 1..sorted.len() {
            let mut j = i;
            while j > 0 && sorted[j - 1] > sorted[j] {
                sorted.swap(j - 1, j);
                j -= 1;
            }
        }
        Some(sorted[rank - 1])
    }

    /// Global-level selection against this queue: strictly-above-threshold
    /// indices (nothing during warm-up), then push every batch loss.
    pub fn select(&mut self, losses: &[f64], r: f64) -> Vec<usize> {
        let selected: Vec<usize> = if self.items.is_empty() {
            Vec::new()
        } else {
            match self.threshold(r) {
                Some(t) => losses
                    .iter()
                    .enumerate()
                    .filter(|&(_, &l)| l > t)
                    .map(|(i, _)| i)
                    .collect(),
                None => (0..losses.len()).collect(),
            }
        };
        for &l in losses {
            self.push(l);
        }
        selected
    }
}

/// Language-wise reference: one QueueModel per language, created on first
/// sight, each fed only its own language's slice of the batch.
pub fn glwd_oracle(
    queues: &mut BTreeMap<String, QueueModel>,
    batch: &[(String, f64)],
    r: f64,
    capacity: usize,
) -> Vec<usize> {
    let mut langs: Vec<&str> = batch.iter().map(|(l, _)| l.as_str()).collect();
    langs.sort_unstable();
    langs.dedup();
    let mut selected = Vec::new();
    for lang in langs {
        let idxs: Vec<usize> = batch
            .iter()
            .enumerate()
            .filter(|(_, (l, _))| l == lang)
            .map(|(i, _)| i)
            .collect();
        let losses: Vec<f64> = idxs.iter().map(|&i| batch[i].1).collect();
        let queue = queues.entry(lang.to_string()).or_insert_with(|| QueueModel::new(capacity));
        for j in queue.select(&losses, r) {
            selected.push(idxs[j]);
        }
    }
    selected.sort_unstable();
    selected
}

// ---------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------

/// Evaluate the batch loss without keeping any gradients around.
pub fn loss_only(
    student: &mut Model,
    teacher: Option<&Model>,
    batch: &[TrainSample],
    plan: &DistillPlan,
    opt: &OptimizerConfig,
    selected: &[usize],
    seed: u64,
    step: u64,
) -> f64 {
    student.zero_grads();
    let (total, _, _) = accumulate_gradients(student, teacher, batch, plan, opt, selected, seed, step)
        .expect("loss stays finite during a gradient check");
    student.zero_grads();
    total
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub n_coords: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Relative error with a floor: true relative error for gradients of
/// meaningful magnitude, absolute error against the floor below it.
pub fn fd_rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3)
}

/// Central finite differences over sampled coordinates of every trainable
/// parameter (plus verification that untrainable parameters stay at exactly
/// zero gradient). The selection is pinned by the caller, so perturbations
/// cannot flip any discrete choice; dropout must be zero in `opt`.
pub fn fd_gradcheck(
    student: &mut Model,
    teacher: Option<&Model>,
    batch: &[TrainSample],
    plan: &DistillPlan,
    opt: &OptimizerConfig,
    selected: &[usize],
    seed: u64,
    per_param: usize,
    eps: f64,
) -> GradCheckReport {
    assert_eq!(opt.dropout, 0.0, "finite differences need a deterministic forward");

    student.zero_grads();
    accumulate_gradients(student, teacher, batch, plan, opt, selected, seed, 0)
        .expect("analytic pass");
    let analytic: Vec<Vec<f64>> = student.params.iter().map(|p| p.grad.clone()).collect();
    let names: Vec<String> = student.params.iter().map(|p| p.name.clone()).collect();
    let trainable: Vec<bool> = student.params.iter().map(|p| p.trainable).collect();
    student.zero_grads();

    for (pi, grads) in analytic.iter().enumerate() {
        if !trainable[pi] {
            assert!(
                grads.iter().all(|&g| g == 0.0),
                "untrainable parameter {} accumulated a gradient",
                names[pi]
            );
        }
    }

    let mut rng = trng(seed ^ 0x5eed_c0de);
    let mut max_rel = 0.0f64;
    let mut worst = String::from("(no coordinates checked)");
    let mut n_coords = 0usize;
    for pi in 0..analytic.len() {
        if !trainable[pi] {
            continue;
        }
        let len = analytic[pi].len();
        let picks = per_param.min(len);
        let mut seen = std::collections::BTreeSet::new();
        while seen.len() < picks {
            seen.insert(rng.gen_range(0..len));
        }
        for &ei in &seen {
            let orig = student.params[pi].data[ei];
            student.params[pi].data[ei] = orig + eps;
            let up = loss_only(student, teacher, batch, plan, opt, selected, seed, 0);
            student.params[pi].data[ei] = orig - eps;
            let down = loss_only(student, teacher, batch, plan, opt, selected, seed, 0);
            student.params[pi].data[ei] = orig;
            let fd = (up - down) / (2.0 * eps);
            let rel = fd_rel_err(analytic[pi][ei], fd);
            n_coords += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = format!(
                    "{}[{ei}]: analytic {:.3e}, finite-difference {fd:.3e}",
                    names[pi], analytic[pi][ei]
                );
            }
        }
    }
    GradCheckReport { n_coords, max_rel_err: max_rel, worst }
}

// ---------------------------------------------------------------------
// Corpus and training fixtures
// ---------------------------------------------------------------------

pub fn spec(
    id: &str,
    family: &str,
    script_offset: u32,
    reorder_rule: ReorderRule,
    pair_count: usize,
    noise_rate: f64,
) -> LanguageSpec {
    LanguageSpec {
        id: id.to_string(),
        family: family.to_string(),
        script_offset,
        reorder_rule,
        pair_count,
        noise_rate,
    }
}

/// Three-tier study layout: the low- and high-resource languages share a
/// family (hence a cipher) and a reorder rule, so cross-lingual transfer
/// has something to transfer; the medium language stands alone.
pub fn study_specs(low: usize, mid: usize, high: usize) -> Vec<LanguageSpec> {
    vec![
        spec("alo", "eastern", 100, ReorderRule::Reverse, low, 0.5),
        spec("cme", "central", 200, ReorderRule::SwapAdjacent, mid, 0.3),
        spec("bhi", "eastern", 300, ReorderRule::Reverse, high, 0.1),
    ]
}

pub fn quick_schedule(max_updates: u64, eval_interval: u64, batch_tokens: usize) -> ScheduleSection {
    ScheduleSection { max_updates, eval_interval, batch_tokens, patience: 1_000, dev_beam: 1 }
}

pub fn quick_opt(base_lr: f64, warmup_steps: u64) -> OptimizerConfig {
    OptimizerConfig {
        base_lr,
        betas: (0.9, 0.98),
        warmup_steps,
        max_grad_norm: 1.0,
        label_smoothing: 0.1,
        dropout: 0.0,
    }
}

/// Per-sample mean target length in subword ids, for sizing batch budgets.
pub fn mean_target_len(samples: &[TrainSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s.target.len() as f64).sum::<f64>() / samples.len() as f64
}

/// Majority sign test: the claim holds in strictly more than half of the
/// paired observations.
pub fn majority(successes: &[bool]) -> bool {
    2 * successes.iter().filter(|&&s| s).count() > successes.len()
}

/// Decode a unified-script source through the model and return the target
/// tokens (end marker stripped when the hypothesis completed).
pub fn decode_tokens(
    model: &Model,
    vocab_src: &Vocab,
    vocab_tgt: &Vocab,
    source: &[String],
    beam: usize,
) -> Vec<String> {
    let src = vocab_src.encode_tokens(source);
    let budget = distillkit::distill::decode_budget(model, src.len());
    let mut hyp = model
        .decode_beam(&src, None, beam, budget, 1.0)
        .expect("decoding a test sentence succeeds");
    if hyp.completed && hyp.tokens.last() == Some(&EOS) {
        hyp.tokens.pop();
    }
    vocab_tgt.decode_tokens(&hyp.tokens)
}

// ---------------------------------------------------------------------
// CLI and filesystem helpers
// ---------------------------------------------------------------------

pub fn cli_bin() -> &'static str {
    env!("CARGO_BIN_EXE_distillkit")
}

/// Run the pipeline binary with a working directory and extra environment.
pub fn run_cli(cwd: &Path, args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(cli_bin());
    cmd.current_dir(cwd).args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("pipeline binary runs")
}

pub fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process exited normally")
}

pub fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Relative path -> file bytes for every file under `root`, skipping paths
/// (relative, `/`-separated) the filter rejects.
pub fn snapshot_tree(root: &Path, skip: &dyn Fn(&str) -> bool) -> BTreeMap<String, Vec<u8>> {
    fn walk(
        dir: &Path,
        root: &Path,
        skip: &dyn Fn(&str) -> bool,
        out: &mut BTreeMap<String, Vec<u8>>,
    ) {
        for entry in std::fs::read_dir(dir).expect("readable directory") {
            let path = entry.expect("directory entry").path();
            if path.is_dir() {
                walk(&path, root, skip, out);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .expect("walked paths stay under the root")
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                if !skip(&rel) {
                    out.insert(rel, std::fs::read(&path).expect("readable file"));
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, skip, &mut out);
    out
}

/// Assert two snapshots hold the same files with the same bytes, with a
/// readable diff when they do not.
pub fn assert_trees_identical(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) {
    let a_keys: Vec<&String> = a.keys().collect();
    let b_keys: Vec<&String> = b.keys().collect();
    assert_eq!(a_keys, b_keys, "the two runs produced different file sets");
    for (path, bytes) in a {
        let other = &b[path];
        assert_eq!(
            bytes, other,
            "{path} differs between runs ({} vs {} bytes)",
            bytes.len(),
            other.len()
        );
    }
}
