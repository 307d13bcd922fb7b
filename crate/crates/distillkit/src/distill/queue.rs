//! FIFO loss queues and hard-sample selection.
//!
//! Three granularities share one rule — "hard" means a per-sample mean NLL
//! above a rank threshold — and differ only in the population the
//! threshold is computed from: the current batch (batch-level), one global
//! queue of recent losses (global-level), or one queue per language
//! (language-wise). Queue thresholds use the nearest-rank quantile of the
//! queue contents *before* the new batch is pushed, and eviction is
//! strictly oldest-first.

use std::collections::BTreeMap;
use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Guards against float noise when r·n lands on an integer boundary; real
/// configs never place a legitimate rank within 1e-9 of the boundary.
const RANK_EPS: f64 = 1e-9;

/// Bounded FIFO of recent per-sample losses.
#[derive(Debug, Clone)]
pub struct SelectionQueue {
    capacity: usize,
    losses: VecDeque<f64>,
    /// Set for per-language queues; `None` for the global queue.
    pub language: Option<String>,
}

impl SelectionQueue {
    pub fn new(capacity: usize, language: Option<String>) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("queue capacity must be at least 1".into()));
        }
        Ok(SelectionQueue { capacity, losses: VecDeque::new(), language })
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Queue contents in insertion order (oldest first).
    pub fn contents(&self) -> Vec<f64> {
        self.losses.iter().copied().collect()
    }

    pub fn push(&mut self, loss: f64) {
        if self.losses.len() == self.capacity {
            self.losses.pop_front();
        }
        self.losses.push_back(loss);
    }

    /// Hardness threshold for ratio `r`: the nearest-rank (1−r)-quantile
    /// of the stored losses. `None` means rank 0 — every loss counts as
    /// hard (the r → 1 limit). Must not be called on an empty queue.
    fn threshold(&self, r: f64) -> Option<f64> {
        let n = self.losses.len();
        debug_assert!(n > 0, "threshold on an empty queue");
        let rank = (((1.0 - r) * n as f64) - RANK_EPS).ceil().max(0.0) as usize;
        if rank == 0 {
            return None;
        }
        let mut sorted = self.contents();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("losses are finite"));
        Some(sorted[rank - 1])
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::InvalidConfig(format!("hard ratio must lie in (0, 1], got {r}")));
    }
    Ok(())
}

fn check_losses(losses: &[f64]) -> Result<()> {
    if let Some(l) = losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("non-finite sample loss {l}")));
    }
    Ok(())
}

/// Indices of the top ⌈r·B⌉ losses, ties broken toward the lower index.
/// Returned sorted ascending. An empty batch selects nothing.
pub fn select_hard_batch(sample_losses: &[f64], r: f64) -> Result<Vec<usize>> {
    check_ratio(r)?;
    check_losses(sample_losses)?;
    let n = sample_losses.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let k = ((r * n as f64) - RANK_EPS).ceil().max(1.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        sample_losses[b]
            .partial_cmp(&sample_losses[a])
            .expect("losses are finite")
            .then(a.cmp(&b))
    });
    let mut selected = order[..k.min(n)].to_vec();
    selected.sort_unstable();
    Ok(selected)
}

/// Global-level selection: sample i is hard iff its loss exceeds the
/// nearest-rank (1−r)-quantile of the queue contents before this batch is
/// pushed. Afterwards every batch loss is pushed (oldest evicted first).
/// An empty queue selects nothing — the warm-up rule.
pub fn select_hard_global(
    queue: &mut SelectionQueue,
    sample_losses: &[f64],
    r: f64,
) -> Result<Vec<usize>> {
    check_ratio(r)?;
    check_losses(sample_losses)?;
    let selected = if queue.is_empty() {
        Vec::new()
    } else {
        match queue.threshold(r) {
            Some(t) => sample_losses
                .iter()
                .enumerate()
                .filter(|&(_, &l)| l > t)
                .map(|(i, _)| i)
                .collect(),
            None => (0..sample_losses.len()).collect(),
        }
    };
    for &l in sample_losses {
        queue.push(l);
    }
    Ok(selected)
}

/// Language-wise selection: the batch is partitioned by language and
/// global-level selection runs independently against each language's own
/// queue (created empty on first sight). Returns the union of selections
/// as batch indices, sorted ascending.
pub fn select_hard_language_wise(
    queues: &mut BTreeMap<String, SelectionQueue>,
    batch: &[(String, f64)],
    r: f64,
    default_capacity: usize,
) -> Result<Vec<usize>> {
    check_ratio(r)?;
    if default_capacity == 0 {
        return Err(Error::InvalidConfig("queue capacity must be at least 1".into()));
    }
    let mut by_lang: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (lang, _)) in batch.iter().enumerate() {
        by_lang.entry(lang.as_str()).or_default().push(i);
    }
    let mut selected = Vec::new();
    for (lang, idxs) in &by_lang {
        let losses: Vec<f64> = idxs.iter().map(|&i| batch[i].1).collect();
        let queue = queues.entry(lang.to_string()).or_insert_with(|| {
            SelectionQueue::new(default_capacity, Some(lang.to_string()))
                .expect("capacity checked above")
        });
        let local = select_hard_global(queue, &losses, r)?;
        selected.extend(local.iter().map(|&j| idxs[j]));
    }
    selected.sort_unstable();
    Ok(selected)
}
