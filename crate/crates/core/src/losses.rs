//! Cross-entropy, Lovász-softmax and their sum, each returning the loss
//! and its gradient with respect to the input.
//!
//! Targets are class indices; rows whose target equals `ignore` contribute
//! neither to the loss nor to the gradient.

use ndarray::{Array2, Axis};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("every row of the batch is ignored")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("target {target} outside 0..{n_classes}")]
    TargetOutOfRange { target: u32, n_classes: usize },
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Array2<f64>,
}

fn check_targets(input: &Array2<f64>, targets: &[u32], ignore: u32) -> Result<usize> {
    if input.nrows() != targets.len() {
        return Err(LossError::ShapeMismatch(format!(
            "{} rows but {} targets",
            input.nrows(),
            targets.len()
        )));
    }
    let n_classes = input.ncols();
    let mut valid = 0;
    for &t in targets {
        if t == ignore {
            continue;
        }
        if t as usize >= n_classes {
            return Err(LossError::TargetOutOfRange { target: t, n_classes });
        }
        valid += 1;
    }
    if valid == 0 {
        return Err(LossError::EmptyBatch);
    }
    Ok(valid)
}

/// Row-wise softmax with max shift.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Mean negative log-softmax over non-ignored rows.
pub fn cross_entropy(logits: &Array2<f64>, targets: &[u32], ignore: u32) -> Result<LossOutput> {
    let valid = check_targets(logits, targets, ignore)? as f64;
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for ((row, mut g), &t) in logits.rows().into_iter().zip(grad.rows_mut()).zip(targets) {
        if t == ignore {
            continue;
        }
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += log_sum - row[t as usize];
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - log_sum).exp() / valid;
        }
        g[t as usize] -= 1.0 / valid;
    }
    Ok(LossOutput {
        loss: loss / valid,
        grad,
    })
}

/// Gradient of the Jaccard loss extension for foreground flags sorted by
/// decreasing error.
fn lovasz_grad(fg_sorted: &[bool]) -> Vec<f64> {
    let gts = fg_sorted.iter().filter(|&&f| f).count() as f64;
    let mut cum_fg = 0.0;
    let mut cum_bg = 0.0;
    let mut prev = 0.0;
    fg_sorted
        .iter()
        .map(|&f| {
            if f {
                cum_fg += 1.0;
            } else {
                cum_bg += 1.0;
            }
            let jaccard = 1.0 - (gts - cum_fg) / (gts + cum_bg);
            let g = jaccard - prev;
            prev = jaccard;
            g
        })
        .collect()
}

/// Per-class Lovász values (`None` for classes absent from the targets)
/// and the gradient of their sum.
fn lovasz_parts(probs: &Array2<f64>, targets: &[u32], ignore: u32) -> (Vec<Option<f64>>, Array2<f64>) {
    let rows: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] != ignore).collect();
    let mut grad = Array2::zeros(probs.dim());
    let mut values = vec![None; probs.ncols()];
    for (c, value) in values.iter_mut().enumerate() {
        if !rows.iter().any(|&i| targets[i] as usize == c) {
            continue;
        }
        let mut items: Vec<(f64, bool, usize)> = rows
            .iter()
            .map(|&i| {
                let fg = targets[i] as usize == c;
                let p = probs[[i, c]];
                (if fg { 1.0 - p } else { p }, fg, i)
            })
            .collect();
        items.sort_by(|a, b| b.0.total_cmp(&a.0));
        let fg: Vec<bool> = items.iter().map(|x| x.1).collect();
        let weights = lovasz_grad(&fg);
        let mut total = 0.0;
        for ((err, fg, i), w) in items.into_iter().zip(weights) {
            total += err * w;
            grad[[i, c]] += if fg { -w } else { w };
        }
        *value = Some(total);
    }
    (values, grad)
}

/// Lovász value of each class present among the non-ignored targets.
pub fn lovasz_per_class(probs: &Array2<f64>, targets: &[u32], ignore: u32) -> Result<Vec<Option<f64>>> {
    check_targets(probs, targets, ignore)?;
    Ok(lovasz_parts(probs, targets, ignore).0)
}

/// Lovász-softmax averaged over the classes present in the batch.
pub fn lovasz_softmax(probs: &Array2<f64>, targets: &[u32], ignore: u32) -> Result<LossOutput> {
    check_targets(probs, targets, ignore)?;
    let (values, mut grad) = lovasz_parts(probs, targets, ignore);
    let present: Vec<f64> = values.into_iter().flatten().collect();
    let n = present.len() as f64;
    grad /= n;
    Ok(LossOutput {
        loss: present.iter().sum::<f64>() / n,
        grad,
    })
}

/// `∂L/∂logits` from `∂L/∂probs` through a row-wise softmax.
pub fn softmax_backward(probs: &Array2<f64>, grad_probs: &Array2<f64>) -> Array2<f64> {
    let dot = (probs * grad_probs).sum_axis(Axis(1)).insert_axis(Axis(1));
    probs * &(grad_probs - &dot)
}

/// Cross-entropy plus `lovasz_weight` times Lovász-softmax of the softmax.
pub fn mixed_loss_weighted(
    logits: &Array2<f64>,
    targets: &[u32],
    ignore: u32,
    lovasz_weight: f64,
) -> Result<LossOutput> {
    let ce = cross_entropy(logits, targets, ignore)?;
    if lovasz_weight == 0.0 {
        return Ok(ce);
    }
    let probs = softmax(logits);
    let lv = lovasz_softmax(&probs, targets, ignore)?;
    let grad = ce.grad + softmax_backward(&probs, &lv.grad) * lovasz_weight;
    Ok(LossOutput {
        loss: ce.loss + lovasz_weight * lv.loss,
        grad,
    })
}

pub fn mixed_loss(logits: &Array2<f64>, targets: &[u32], ignore: u32) -> Result<LossOutput> {
    mixed_loss_weighted(logits, targets, ignore, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    const IGN: u32 = u32::MAX;

    #[test]
    fn uniform_logits_give_ln_c() {
        let out = cross_entropy(&Array2::zeros((4, 5)), &[0, 1, 2, 3], IGN).unwrap();
        assert!((out.loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_vanish() {
        let logits = array![[200.0, 0.0, 0.0], [0.0, 0.0, 200.0]];
        let out = mixed_loss(&logits, &[0, 2], IGN).unwrap();
        assert!(out.loss < 1e-12);
        assert!(out.grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn two_class_hand_derivation() {
        // Row 0: logits (0, ln 3) → p = (1/4, 3/4), target 1.
        // Row 1: logits (0, 0)    → p = (1/2, 1/2), target 0.
        let logits = array![[0.0, 3f64.ln()], [0.0, 0.0]];
        let out = cross_entropy(&logits, &[1, 0], IGN).unwrap();
        let expected = (-(0.75f64).ln() - (0.5f64).ln()) / 2.0;
        assert!((out.loss - expected).abs() < 1e-14);
        let g = array![[0.125, -0.125], [-0.25, 0.25]];
        assert!((&out.grad - &g).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn ignored_rows_have_zero_gradient() {
        let logits = array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]];
        let out = mixed_loss(&logits, &[0, IGN, 1], IGN).unwrap();
        assert!(out.grad.row(1).iter().all(|&g| g == 0.0));
        let dropped = mixed_loss(&array![[1.0, 2.0], [0.5, 0.5]], &[0, 1], IGN).unwrap();
        assert!((out.loss - dropped.loss).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let l = Array2::zeros((2, 3));
        assert_eq!(cross_entropy(&l, &[IGN, IGN], IGN), Err(LossError::EmptyBatch));
        assert_eq!(lovasz_softmax(&l, &[IGN, IGN], IGN), Err(LossError::EmptyBatch));
        assert!(matches!(cross_entropy(&l, &[0], IGN), Err(LossError::ShapeMismatch(_))));
        assert!(matches!(mixed_loss(&l, &[0, 3], IGN), Err(LossError::TargetOutOfRange { .. })));
    }

    #[test]
    fn exact_one_hot_probs_zero_lovasz() {
        let p = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        assert_eq!(lovasz_softmax(&p, &[0, 1, 0], IGN).unwrap().loss, 0.0);
    }

    #[test]
    fn hard_binary_prediction_is_one_minus_iou() {
        // Class 1 predicted on rows 0 and 1, present only on row 0.
        let p = array![[0.0, 1.0], [0.0, 1.0], [1.0, 0.0]];
        let per = lovasz_per_class(&p, &[1, 0, 0], IGN).unwrap();
        assert!((per[1].unwrap() - 0.5).abs() < 1e-15);
        // Class 0: predicted {2}, truth {1, 2} → IoU 1/2.
        assert!((per[0].unwrap() - 0.5).abs() < 1e-15);
    }

    /// Lovász extension through its threshold form,
    /// f(m) = Σ_k (m_(k) − m_(k+1)) · Δ(top-k rows),
    /// where Δ(M) = 1 − |F \ M| / |F ∪ M| is the Jaccard loss when the rows
    /// in M are exactly the mispredicted ones.
    fn threshold_oracle(errors: &[f64], fg: &[bool]) -> f64 {
        use std::collections::BTreeSet;
        let mut order: Vec<usize> = (0..errors.len()).collect();
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
        let f: BTreeSet<usize> = (0..fg.len()).filter(|&i| fg[i]).collect();
        let mut total = 0.0;
        for k in 1..=order.len() {
            let top: BTreeSet<usize> = order[..k].iter().copied().collect();
            let kept = f.difference(&top).count() as f64;
            let union = f.union(&top).count() as f64;
            let delta = 1.0 - kept / union;
            let next = if k < order.len() { errors[order[k]] } else { 0.0 };
            total += (errors[order[k - 1]] - next) * delta;
        }
        total
    }

    fn random_probs(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let logits = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-2.0..2.0));
        softmax(&logits)
    }

    #[test]
    fn lovasz_matches_threshold_oracle() {
        for seed in 0..200 {
            let p = random_probs(4, 3, seed);
            let targets: Vec<u32> = (0..4).map(|i| (seed as u32 + i * 7) % 3).collect();
            let per = lovasz_per_class(&p, &targets, IGN).unwrap();
            for c in 0..3 {
                let fg: Vec<bool> = targets.iter().map(|&t| t as usize == c).collect();
                if !fg.iter().any(|&f| f) {
                    assert!(per[c].is_none());
                    continue;
                }
                let errors: Vec<f64> = (0..4)
                    .map(|i| if fg[i] { 1.0 - p[[i, c]] } else { p[[i, c]] })
                    .collect();
                let oracle = threshold_oracle(&errors, &fg);
                assert!((per[c].unwrap() - oracle).abs() < 1e-12, "seed {seed} class {c}");
            }
        }
    }

    #[test]
    fn mixed_is_sum_of_parts() {
        for seed in 0..20 {
            let logits = random_probs(6, 4, seed).mapv(|p| p.ln() * 1.7);
            let t: Vec<u32> = (0..6).map(|i| (i * 3 + seed as u32) % 4).collect();
            let ce = cross_entropy(&logits, &t, IGN).unwrap().loss;
            let lv = lovasz_softmax(&softmax(&logits), &t, IGN).unwrap().loss;
            assert!((mixed_loss(&logits, &t, IGN).unwrap().loss - (ce + lv)).abs() < 1e-12);
        }
    }

    fn fd_check(logits: &Array2<f64>, targets: &[u32]) {
        let out = mixed_loss(logits, targets, IGN).unwrap();
        let h = 1e-6;
        for r in 0..logits.nrows() {
            for c in 0..logits.ncols() {
                let mut plus = logits.clone();
                plus[[r, c]] += h;
                let mut minus = logits.clone();
                minus[[r, c]] -= h;
                let numeric = (mixed_loss(&plus, targets, IGN).unwrap().loss
                    - mixed_loss(&minus, targets, IGN).unwrap().loss)
                    / (2.0 * h);
                let a = out.grad[[r, c]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                assert!(rel < 1e-5, "[{r},{c}] {a} vs {numeric}");
            }
        }
    }

    #[test]
    fn mixed_gradient_matches_finite_differences() {
        for seed in 0..30 {
            let logits = random_probs(5, 3, seed).mapv(|p| p.ln() * 2.3);
            let t: Vec<u32> = (0..5).map(|i| if i == 2 { IGN } else { (i + seed as u32) % 3 }).collect();
            fd_check(&logits, &t);
        }
    }

    proptest! {
        #[test]
        fn lovasz_row_permutation_invariant(seed in 0u64..1000, shift in 1usize..6) {
            let p = random_probs(6, 3, seed);
            let t: Vec<u32> = (0..6).map(|i| ((i as u64 * 5 + seed) % 3) as u32).collect();
            let perm: Vec<usize> = (0..6).map(|i| (i + shift) % 6).collect();
            let pp = p.select(Axis(0), &perm);
            let tp: Vec<u32> = perm.iter().map(|&i| t[i]).collect();
            let a = lovasz_softmax(&p, &t, IGN).unwrap().loss;
            let b = lovasz_softmax(&pp, &tp, IGN).unwrap().loss;
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn losses_finite_for_finite_logits(values in proptest::collection::vec(-1e3f64..1e3, 12), t in proptest::collection::vec(0u32..4, 3)) {
            let logits = Array2::from_shape_vec((3, 4), values).unwrap();
            let out = mixed_loss(&logits, &t, IGN).unwrap();
            prop_assert!(out.loss.is_finite() && out.loss >= 0.0);
            prop_assert!(out.grad.iter().all(|g| g.is_finite()));
        }
    }
}
