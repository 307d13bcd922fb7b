//! Early stopping on a dev-score history: quit once the best score is more
//! than `patience` evaluation rounds in the past.

/// Default evaluation-round patience for training loops.
pub const DEFAULT_PATIENCE: usize = 5;

/// True iff the best value in `history` occurred more than `patience`
/// rounds before the latest entry. Ties are not improvements: the "best"
/// round is the first occurrence of the maximum, so a plateau at the peak
/// still runs the clock out. An empty history never stops.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    let mut best_idx = 0usize;
    let mut best = f64::NEG_INFINITY;
    for (i, &v) in history.iter().enumerate() {
        if v > best {
            best = v;
            best_idx = i;
        }
    }
    match history.len() {
        0 => false,
        n => n - 1 - best_idx > patience,
    }
}
