//! Training objective: multi-level cross entropy over per-granularity class
//! scores, multi-level smooth-L1 box regression, the RPN's binary
//! classification and localization terms, and their sum.
//!
//! Each level's term is averaged over its rows (proposals), so loss
//! magnitudes are batch-size invariant; level contributions are scaled by
//! the per-level weights and summed.

use crate::scalar::Scalar;
use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probabilities are clamped here before `ln` so confident-wrong
/// predictions cannot produce infinities.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("weight vectors must have equal nonzero length: w_k={wk}, w_r={wr}")]
    BadWeightShape { wk: usize, wr: usize },
    #[error("negative loss weight {0}")]
    NegativeWeight(f64),
    #[error("expected {expected} levels, got {got}")]
    LevelCountMismatch { expected: usize, got: usize },
    #[error("level {level}: {rows} score rows but {targets} targets")]
    RowMismatch {
        level: usize,
        rows: usize,
        targets: usize,
    },
    #[error("level {level}: target class {class} out of range for width {width}")]
    TargetOutOfRange {
        level: usize,
        class: usize,
        width: usize,
    },
    #[error("positive mask length {mask} does not match {rows} rows")]
    MaskMismatch { mask: usize, rows: usize },
    #[error("non-finite loss component {name} = {value}")]
    NonFinite { name: &'static str, value: f64 },
}

/// Per-level weighting factors: `w_k` scales each level's classification
/// term, `w_r` each level's regression term. Level count `L` is the shared
/// length. The shipped configurations use `w_r = 0` on the coarse level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights<T> {
    pub w_k: Vec<T>,
    pub w_r: Vec<T>,
}

impl<T: Scalar> LossWeights<T> {
    pub fn new(w_k: Vec<T>, w_r: Vec<T>) -> Result<Self, LossError> {
        if w_k.is_empty() || w_k.len() != w_r.len() {
            return Err(LossError::BadWeightShape {
                wk: w_k.len(),
                wr: w_r.len(),
            });
        }
        for w in w_k.iter().chain(w_r.iter()) {
            if *w < T::zero() {
                return Err(LossError::NegativeWeight(w.as_f64()));
            }
        }
        Ok(Self { w_k, w_r })
    }

    /// Single-level weights `(1, 1)`: the standard softmax cross entropy and
    /// smooth-L1 pair used by single-branch and merged heads.
    pub fn single_level() -> Self {
        Self {
            w_k: vec![T::one()],
            w_r: vec![T::one()],
        }
    }

    /// Two-level default: unit classification weights on both levels and
    /// regression on the fine level only.
    pub fn two_level_default() -> Self {
        Self {
            w_k: vec![T::one(), T::one()],
            w_r: vec![T::zero(), T::one()],
        }
    }

    pub fn levels(&self) -> usize {
        self.w_k.len()
    }
}

/// Additive breakdown of one training step's objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub e_ce: f64,
    pub e_loc: f64,
    pub rpn_cls: f64,
    pub rpn_loc: f64,
    pub total: f64,
}

/// Piecewise smooth-L1: `0.5 x^2` for `|x| < 1`, `|x| - 0.5` otherwise.
pub fn smooth_l1<T: Scalar>(x: T) -> T {
    let ax = x.abs();
    if ax < T::one() {
        T::of(0.5) * x * x
    } else {
        ax - T::of(0.5)
    }
}

/// Derivative of [`smooth_l1`], clamped to `[-1, 1]`.
pub fn smooth_l1_grad<T: Scalar>(x: T) -> T {
    x.max(-T::one()).min(T::one())
}

fn validate_levels<T: Scalar>(
    scores: &[ArrayView2<T>],
    targets: &[&[usize]],
    w: &LossWeights<T>,
) -> Result<(), LossError> {
    if scores.len() != w.levels() {
        return Err(LossError::LevelCountMismatch {
            expected: w.levels(),
            got: scores.len(),
        });
    }
    if targets.len() != w.levels() {
        return Err(LossError::LevelCountMismatch {
            expected: w.levels(),
            got: targets.len(),
        });
    }
    for (level, (s, t)) in scores.iter().zip(targets.iter()).enumerate() {
        if s.nrows() != t.len() {
            return Err(LossError::RowMismatch {
                level,
                rows: s.nrows(),
                targets: t.len(),
            });
        }
        if let Some(&class) = t.iter().find(|&&c| c >= s.ncols()) {
            return Err(LossError::TargetOutOfRange {
                level,
                class,
                width: s.ncols(),
            });
        }
    }
    Ok(())
}

/// Multi-level softmax cross entropy. For each level: normalize the raw
/// scores row-wise, take `-ln` of the probability at the target class
/// (clamped at [`PROB_CLAMP`]), average over rows, scale by that level's
/// `w_k`, and sum over levels.
pub fn multilevel_ce<T: Scalar>(
    scores: &[ArrayView2<T>],
    targets: &[&[usize]],
    w: &LossWeights<T>,
) -> Result<T, LossError> {
    Ok(multilevel_ce_grad(scores, targets, w)?.0)
}

/// [`multilevel_ce`] together with its gradient with respect to each
/// level's raw scores.
pub fn multilevel_ce_grad<T: Scalar>(
    scores: &[ArrayView2<T>],
    targets: &[&[usize]],
    w: &LossWeights<T>,
) -> Result<(T, Vec<Array2<T>>), LossError> {
    validate_levels(scores, targets, w)?;
    let clamp = T::of(PROB_CLAMP);
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(scores.len());
    for (level, (s, t)) in scores.iter().zip(targets.iter()).enumerate() {
        let rows = s.nrows();
        let wk = w.w_k[level];
        let mut grad = Array2::<T>::zeros(s.raw_dim());
        if rows == 0 {
            grads.push(grad);
            continue;
        }
        let inv_rows = T::one() / T::of(rows as f64);
        let mut level_sum = T::zero();
        for (r, row) in s.outer_iter().enumerate() {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for &v in row.iter() {
                denom += (v - max).exp();
            }
            let target = t[r];
            let p = ((row[target] - max).exp() / denom).max(clamp);
            level_sum += -p.ln();
            // d/ds of mean_r(-ln softmax(s)_t) = (softmax - onehot)/rows.
            let scale = wk * inv_rows;
            for (c, &v) in row.iter().enumerate() {
                let soft = (v - max).exp() / denom;
                let onehot = if c == target { T::one() } else { T::zero() };
                grad[[r, c]] = (soft - onehot) * scale;
            }
        }
        total += wk * level_sum * inv_rows;
        grads.push(grad);
    }
    Ok((total, grads))
}

/// Multi-level smooth-L1 localization loss. `deltas[l]` holds each level's
/// predicted offsets read out at the true class, one `(tx, ty, tw, th)` row
/// per proposal; `target` holds the regression targets. Only rows flagged
/// positive contribute; each level is averaged over the positive count and
/// scaled by its `w_r`.
pub fn multilevel_loc<T: Scalar>(
    deltas: &[ArrayView2<T>],
    target: ArrayView2<T>,
    positive: &[bool],
    w: &LossWeights<T>,
) -> Result<T, LossError> {
    Ok(multilevel_loc_grad(deltas, target, positive, w)?.0)
}

/// [`multilevel_loc`] together with its gradient with respect to each
/// level's predicted deltas.
pub fn multilevel_loc_grad<T: Scalar>(
    deltas: &[ArrayView2<T>],
    target: ArrayView2<T>,
    positive: &[bool],
    w: &LossWeights<T>,
) -> Result<(T, Vec<Array2<T>>), LossError> {
    if deltas.len() != w.levels() {
        return Err(LossError::LevelCountMismatch {
            expected: w.levels(),
            got: deltas.len(),
        });
    }
    for d in deltas {
        if d.nrows() != positive.len() {
            return Err(LossError::MaskMismatch {
                mask: positive.len(),
                rows: d.nrows(),
            });
        }
        if d.nrows() != target.nrows() {
            return Err(LossError::RowMismatch {
                level: 0,
                rows: d.nrows(),
                targets: target.nrows(),
            });
        }
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let norm = T::one() / T::of(n_pos.max(1) as f64);
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(deltas.len());
    for (level, d) in deltas.iter().enumerate() {
        let wr = w.w_r[level];
        let mut grad = Array2::<T>::zeros(d.raw_dim());
        if wr > T::zero() {
            let mut level_sum = T::zero();
            for (r, &is_pos) in positive.iter().enumerate() {
                if !is_pos {
                    continue;
                }
                for c in 0..4 {
                    let diff = d[[r, c]] - target[[r, c]];
                    level_sum += smooth_l1(diff);
                    grad[[r, c]] = wr * norm * smooth_l1_grad(diff);
                }
            }
            total += wr * level_sum * norm;
        }
        grads.push(grad);
    }
    Ok((total, grads))
}

/// Anchor supervision state for the RPN losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// RPN objective: binary cross entropy (with logits) over labeled anchors,
/// averaged over the non-ignored count, plus smooth-L1 over the positive
/// anchors' deltas, averaged over the positive count. Ignored anchors
/// contribute nothing.
pub fn rpn_loss<T: Scalar>(
    objectness: ArrayView1<T>,
    deltas: ArrayView2<T>,
    labels: &[AnchorLabel],
    delta_targets: ArrayView2<T>,
) -> Result<(T, T), LossError> {
    let (cls, loc, _, _) = rpn_loss_grad(objectness, deltas, labels, delta_targets)?;
    Ok((cls, loc))
}

/// [`rpn_loss`] together with gradients for the objectness logits and
/// anchor deltas.
pub fn rpn_loss_grad<T: Scalar>(
    objectness: ArrayView1<T>,
    deltas: ArrayView2<T>,
    labels: &[AnchorLabel],
    delta_targets: ArrayView2<T>,
) -> Result<(T, T, Vec<T>, Array2<T>), LossError> {
    if objectness.len() != labels.len() || deltas.nrows() != labels.len() {
        return Err(LossError::MaskMismatch {
            mask: labels.len(),
            rows: objectness.len(),
        });
    }
    let n_labeled = labels
        .iter()
        .filter(|l| !matches!(l, AnchorLabel::Ignore))
        .count();
    let n_pos = labels
        .iter()
        .filter(|l| matches!(l, AnchorLabel::Positive))
        .count();
    let cls_norm = T::one() / T::of(n_labeled.max(1) as f64);
    let loc_norm = T::one() / T::of(n_pos.max(1) as f64);

    let mut cls = T::zero();
    let mut loc = T::zero();
    let mut d_obj = vec![T::zero(); labels.len()];
    let mut d_deltas = Array2::<T>::zeros(deltas.raw_dim());
    for (i, label) in labels.iter().enumerate() {
        let z = match label {
            AnchorLabel::Positive => T::one(),
            AnchorLabel::Negative => T::zero(),
            AnchorLabel::Ignore => continue,
        };
        let x = objectness[i];
        // Stable BCE with logits: max(x,0) - x z + ln(1 + exp(-|x|)).
        cls += x.max(T::zero()) - x * z + (T::one() + (-x.abs()).exp()).ln();
        let sigmoid = T::one() / (T::one() + (-x).exp());
        d_obj[i] = (sigmoid - z) * cls_norm;
        if matches!(label, AnchorLabel::Positive) {
            for c in 0..4 {
                let diff = deltas[[i, c]] - delta_targets[[i, c]];
                loc += smooth_l1(diff);
                d_deltas[[i, c]] = loc_norm * smooth_l1_grad(diff);
            }
        }
    }
    Ok((cls * cls_norm, loc * loc_norm, d_obj, d_deltas))
}

/// Sum the objective's parts, retaining the breakdown for logging. Errors
/// on any non-finite part (the signal that training diverged).
pub fn total_loss(
    e_ce: f64,
    e_loc: f64,
    rpn_cls: f64,
    rpn_loc: f64,
) -> Result<LossBreakdown, LossError> {
    for (name, value) in [
        ("e_ce", e_ce),
        ("e_loc", e_loc),
        ("rpn_cls", rpn_cls),
        ("rpn_loc", rpn_loc),
    ] {
        if !value.is_finite() {
            return Err(LossError::NonFinite { name, value });
        }
    }
    Ok(LossBreakdown {
        e_ce,
        e_loc,
        rpn_cls,
        rpn_loc,
        total: e_ce + e_loc + rpn_cls + rpn_loc,
    })
}
