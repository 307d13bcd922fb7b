//! Value-level loss kernels.
//!
//! Each kernel returns both the scalar loss and the gradient with respect to
//! the logits, so the autodiff tape can cache the gradient at forward time
//! and the public value-only wrappers can discard it.

use crate::error::{Error, Result};
use crate::numerics::kernels::log_softmax_rows;

pub struct LossWithGrad {
    pub loss: f64,
    /// d loss / d logits, same layout as the logits matrix.
    pub grad: Vec<f64>,
    /// Number of rows that contributed to the mean.
    pub n_valid: usize,
}

fn check_finite(name: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{name} contains a non-finite value")));
    }
    Ok(())
}

/// Label-smoothed cross entropy over a `rows x cols` logit matrix, averaged
/// over rows whose target is not `pad_id`. With `eps = 0` this is the plain
/// mean negative log-likelihood.
///
/// The smoothed target distribution puts `1 - eps` on the reference class and
/// spreads `eps` uniformly over the remaining `cols - 1` classes.
pub fn label_smoothed_ce_with_grad(
    logits: &[f64],
    rows: usize,
    cols: usize,
    targets: &[usize],
    pad_id: usize,
    eps: f64,
) -> Result<LossWithGrad> {
    if logits.len() != rows * cols {
        return Err(Error::Shape(format!(
            "logits length {} does not match {rows}x{cols}",
            logits.len()
        )));
    }
    if targets.len() != rows {
        return Err(Error::Shape(format!(
            "targets length {} does not match {rows} rows",
            targets.len()
        )));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidConfig(format!(
            "label smoothing eps must lie in [0, 1), got {eps}"
        )));
    }
    if cols < 2 && eps > 0.0 {
        return Err(Error::InvalidConfig(
            "label smoothing requires at least two classes".into(),
        ));
    }
    check_finite("logits", logits)?;
    for &t in targets {
        if t != pad_id && t >= cols {
            return Err(Error::Shape(format!(
                "target id {t} out of range for {cols} classes"
            )));
        }
    }
    let n_valid = targets.iter().filter(|&&t| t != pad_id).count();
    if n_valid == 0 {
        return Err(Error::EmptyLossSupport);
    }

    let logp = log_softmax_rows(logits, rows, cols);
    let off = if cols > 1 { eps / (cols as f64 - 1.0) } else { 0.0 };
    let mut loss = 0.0;
    let mut grad = vec![0.0; rows * cols];
    let inv_n = 1.0 / n_valid as f64;
    for (r, &t) in targets.iter().enumerate() {
        if t == pad_id {
            continue;
        }
        let row = &logp[r * cols..(r + 1) * cols];
        let mut row_loss = 0.0;
        for (c, &lp) in row.iter().enumerate() {
            let q = if c == t { 1.0 - eps } else { off };
            if q != 0.0 {
                row_loss -= q * lp;
            }
            // d/dlogit = softmax - q, scaled by 1/n_valid
            grad[r * cols + c] = (lp.exp() - q) * inv_n;
        }
        loss += row_loss;
    }
    Ok(LossWithGrad { loss: loss * inv_n, grad, n_valid })
}

/// KL(teacher || student) per valid row, averaged over valid rows, given
/// precomputed teacher probabilities. Teacher terms with zero probability
/// contribute nothing.
pub fn kl_from_teacher_with_grad(
    student_logits: &[f64],
    rows: usize,
    cols: usize,
    teacher_probs: &[f64],
    valid: &[bool],
) -> Result<LossWithGrad> {
    if student_logits.len() != rows * cols || teacher_probs.len() != rows * cols {
        return Err(Error::Shape(format!(
            "student logits ({}) and teacher probs ({}) must both be {rows}x{cols}",
            student_logits.len(),
            teacher_probs.len()
        )));
    }
    if valid.len() != rows {
        return Err(Error::Shape(format!(
            "validity mask length {} does not match {rows} rows",
            valid.len()
        )));
    }
    check_finite("student logits", student_logits)?;
    check_finite("teacher probs", teacher_probs)?;
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::EmptyLossSupport);
    }

    let logp = log_softmax_rows(student_logits, rows, cols);
    let inv_n = 1.0 / n_valid as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; rows * cols];
    for r in 0..rows {
        if !valid[r] {
            continue;
        }
        let tp = &teacher_probs[r * cols..(r + 1) * cols];
        let lp = &logp[r * cols..(r + 1) * cols];
        let mut row = 0.0;
        for c in 0..cols {
            if tp[c] > 0.0 {
                row += tp[c] * (tp[c].ln() - lp[c]);
            }
            // d/dlogit = softmax(student) - teacher, scaled by 1/n_valid
            grad[r * cols + c] = (lp[c].exp() - tp[c]) * inv_n;
        }
        loss += row;
    }
    Ok(LossWithGrad { loss: loss * inv_n, grad, n_valid })
}

/// Label-smoothed cross entropy (value only).
pub fn label_smoothed_ce(
    logits: &[f64],
    rows: usize,
    cols: usize,
    targets: &[usize],
    pad_id: usize,
    eps: f64,
) -> Result<f64> {
    label_smoothed_ce_with_grad(logits, rows, cols, targets, pad_id, eps).map(|o| o.loss)
}

/// KL(teacher || student) from raw logit matrices (value only). Rows are
/// marked valid by `valid`; an all-false mask is an error because the mean
/// would be over an empty set.
pub fn kl_div(
    teacher_logits: &[f64],
    student_logits: &[f64],
    rows: usize,
    cols: usize,
    valid: &[bool],
) -> Result<f64> {
    if teacher_logits.len() != rows * cols {
        return Err(Error::Shape(format!(
            "teacher logits length {} does not match {rows}x{cols}",
            teacher_logits.len()
        )));
    }
    check_finite("teacher logits", teacher_logits)?;
    let teacher_probs = crate::numerics::kernels::softmax_rows(teacher_logits, None, rows, cols);
    kl_from_teacher_with_grad(student_logits, rows, cols, &teacher_probs, valid).map(|o| o.loss)
}

/// Mean negative log-likelihood of the reference tokens (no smoothing).
/// This is the per-sample hardness measure used by selective distillation.
pub fn mean_nll(
    logits: &[f64],
    rows: usize,
    cols: usize,
    targets: &[usize],
    pad_id: usize,
) -> Result<f64> {
    label_smoothed_ce(logits, rows, cols, targets, pad_id, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    const V: usize = 4;

    #[test]
    fn uniform_logits_give_log_vocab_nll() {
        // With all-equal logits every class has probability 1/4, so the
        // unsmoothed CE is ln 4 regardless of the target.
        let logits = vec![0.0; V];
        let loss = label_smoothed_ce(&logits, 1, V, &[2], 0, 0.0).unwrap();
        assert!((loss - (V as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn smoothing_keeps_uniform_case_at_log_vocab() {
        // Smoothed target is still a distribution; against uniform logits the
        // cross entropy stays -sum q * ln(1/V) = ln V.
        let logits = vec![0.0; V];
        let loss = label_smoothed_ce(&logits, 1, V, &[2], 0, 0.1).unwrap();
        assert!((loss - (V as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn pad_rows_are_excluded_from_mean() {
        let logits = vec![0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0];
        // Row 1 is padding (pad_id = 0), so only row 0 counts.
        let loss = label_smoothed_ce(&logits, 2, V, &[2, 0], 0, 0.0).unwrap();
        assert!((loss - (V as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn all_pad_targets_error() {
        let logits = vec![0.0; V];
        assert!(matches!(
            label_smoothed_ce(&logits, 1, V, &[0], 0, 0.0),
            Err(crate::error::Error::EmptyLossSupport)
        ));
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let logits = vec![0.3, -1.2, 0.0, 2.0];
        let kl = kl_div(&logits, &logits, 1, V, &[true]).unwrap();
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn kl_shift_invariance_of_logits() {
        let t = vec![0.3, -1.2, 0.0, 2.0];
        let shifted: Vec<f64> = t.iter().map(|v| v + 7.5).collect();
        let kl = kl_div(&t, &shifted, 1, V, &[true]).unwrap();
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn kl_one_hot_teacher_vs_uniform_student_is_log_vocab() {
        // In the one-hot limit the KL collapses to -ln q(correct) = ln V.
        let teacher = vec![60.0, 0.0, 0.0, 0.0];
        let student = vec![0.0; V];
        let kl = kl_div(&teacher, &student, 1, V, &[true]).unwrap();
        assert!((kl - (V as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn kl_empty_mask_errors() {
        let logits = vec![0.0; V];
        assert!(matches!(
            kl_div(&logits, &logits, 1, V, &[false]),
            Err(crate::error::Error::EmptyLossSupport)
        ));
    }

    #[test]
    fn kl_matches_quadrature_free_definition() {
        // Directly evaluate sum p ln(p/q) for a hand-built pair.
        let t = vec![2.0, 0.0, -1.0, 0.5];
        let s = vec![0.0, 1.0, 0.0, -0.5];
        let tp = crate::numerics::kernels::softmax_rows(&t, None, 1, V);
        let sp = crate::numerics::kernels::softmax_rows(&s, None, 1, V);
        let expect: f64 = (0..V).map(|c| tp[c] * (tp[c] / sp[c]).ln()).sum();
        let kl = kl_div(&t, &s, 1, V, &[true]).unwrap();
        assert!((kl - expect).abs() < 1e-12);
    }

    #[test]
    fn nonfinite_logits_rejected() {
        let logits = vec![0.0, f64::NAN, 0.0, 0.0];
        assert!(label_smoothed_ce(&logits, 1, V, &[1], 0, 0.0).is_err());
    }
}
