//! Segmentation loss `0.5 * (1 - soft Dice) + 0.5 * cross-entropy` and
//! patient-level hard Dice.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

pub const DICE_EPS: f64 = 1e-5;
pub const LAMBDA: f64 = 0.5;

/// Per-pixel class probabilities of (b, k, h, w) logits, same layout.
pub fn class_softmax(logits: &[f64], b: usize, k: usize, hw: usize) -> Vec<f64> {
    let mut p = vec![0.0; logits.len()];
    for n in 0..b {
        for i in 0..hw {
            let at = |c: usize| (n * k + c) * hw + i;
            let m = (0..k).map(|c| logits[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (logits[at(c)] - m).exp()).sum();
            for c in 0..k {
                p[at(c)] = (logits[at(c)] - m).exp() / z;
            }
        }
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub soft_dice: f64,
    pub cross_entropy: f64,
}

fn check(shape: &[usize], labels: &[u8]) -> Result<(usize, usize, usize)> {
    let [b, k, h, w] = match *shape {
        [b, k, h, w] => [b, k, h, w],
        _ => return Err(Error::shape("loss", format!("logits must be rank 4, got {shape:?}"))),
    };
    if k < 2 {
        return Err(Error::shape("loss", "need at least one foreground class"));
    }
    if labels.len() != b * h * w {
        return Err(Error::shape(
            "loss",
            format!("{} labels for logits {shape:?}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::shape("loss", format!("label {bad} with {k} classes")));
    }
    Ok((b, k, h * w))
}

/// Loss value and gradient with respect to the logits.
pub fn loss_and_grad(logits: &[f64], shape: &[usize], labels: &[u8]) -> Result<(LossParts, Vec<f64>)> {
    let (b, k, hw) = check(shape, labels)?;
    if logits.len() != b * k * hw {
        return Err(Error::shape("loss", "logit count does not match shape"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "loss input".into(),
        });
    }
    let p = class_softmax(logits, b, k, hw);
    let pixels = (b * hw) as f64;
    let y = |n: usize, c: usize, i: usize| (labels[n * hw + i] as usize == c) as u8 as f64;

    let n_fg = (k - 1) as f64;
    let mut dice_sum = 0.0;
    // d(loss)/d(p) from the Dice term
    let mut gp = vec![0.0; p.len()];
    for c in 1..k {
        let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
        for n in 0..b {
            for i in 0..hw {
                let pv = p[(n * k + c) * hw + i];
                let yv = y(n, c, i);
                inter += pv * yv;
                sp += pv;
                sy += yv;
            }
        }
        let num = 2.0 * inter + DICE_EPS;
        let den = sp + sy + DICE_EPS;
        dice_sum += num / den;
        for n in 0..b {
            for i in 0..hw {
                let dd = (2.0 * y(n, c, i) * den - num) / (den * den);
                gp[(n * k + c) * hw + i] = -LAMBDA * dd / n_fg;
            }
        }
    }
    let soft_dice = dice_sum / n_fg;

    let mut ce = 0.0;
    for n in 0..b {
        for i in 0..hw {
            let c = labels[n * hw + i] as usize;
            ce -= p[(n * k + c) * hw + i].max(f64::MIN_POSITIVE).ln();
        }
    }
    ce /= pixels;

    let mut grad = vec![0.0; p.len()];
    for n in 0..b {
        for i in 0..hw {
            let at = |c: usize| (n * k + c) * hw + i;
            let dot: f64 = (0..k).map(|c| p[at(c)] * gp[at(c)]).sum();
            for c in 0..k {
                let dice_part = p[at(c)] * (gp[at(c)] - dot);
                let ce_part = (1.0 - LAMBDA) * (p[at(c)] - y(n, c, i)) / pixels;
                grad[at(c)] = dice_part + ce_part;
            }
        }
    }
    let total = LAMBDA * (1.0 - soft_dice) + (1.0 - LAMBDA) * ce;
    if !total.is_finite() {
        return Err(Error::NonFinite {
            context: "loss value".into(),
        });
    }
    Ok((
        LossParts {
            total,
            soft_dice,
            cross_entropy: ce,
        },
        grad,
    ))
}

/// Records the loss on the graph.
pub fn loss(g: &mut Graph, logits: Var, labels: &[u8]) -> Result<(Var, LossParts)> {
    let shape = g.shape(logits).to_vec();
    let (parts, grad) = loss_and_grad(g.value(logits), &shape, labels)?;
    let v = g.scalar_fn(logits, parts.total, grad)?;
    Ok((v, parts))
}

/// Hard labels from (b, k, h, w) logits, lowest class on ties.
pub fn argmax_labels(logits: &[f64], shape: &[usize]) -> Vec<u8> {
    let (b, k, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = Vec::with_capacity(b * hw);
    for n in 0..b {
        for i in 0..hw {
            let best = (0..k).fold(0, |best, c| {
                if logits[(n * k + c) * hw + i] > logits[(n * k + best) * hw + i] {
                    c
                } else {
                    best
                }
            });
            out.push(best as u8);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientDice {
    /// Dice per class, background included at index 0.
    pub per_class: Vec<f64>,
    pub mean_foreground: f64,
}

/// Dice from TP/FP/FN summed over all slices of one patient.
pub fn patient_dice(predictions: &[Vec<u8>], truths: &[Vec<u8>], classes: usize) -> Result<PatientDice> {
    if predictions.len() != truths.len() {
        return Err(Error::shape(
            "patient_dice",
            format!("{} predicted slices vs {} ground-truth slices", predictions.len(), truths.len()),
        ));
    }
    if classes < 2 {
        return Err(Error::shape("patient_dice", "need at least one foreground class"));
    }
    let mut tp = vec![0u64; classes];
    let mut fp = vec![0u64; classes];
    let mut fn_ = vec![0u64; classes];
    for (pred, truth) in predictions.iter().zip(truths) {
        if pred.len() != truth.len() {
            return Err(Error::shape("patient_dice", "slice pixel counts differ"));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            let (p, t) = (p as usize, t as usize);
            if p == t {
                tp[p] += 1;
            } else {
                fp[p] += 1;
                fn_[t] += 1;
            }
        }
    }
    let per_class: Vec<f64> = (0..classes)
        .map(|c| {
            let den = 2 * tp[c] + fp[c] + fn_[c];
            if den == 0 {
                1.0
            } else {
                2.0 * tp[c] as f64 / den as f64
            }
        })
        .collect();
    let mean_foreground = per_class[1..].iter().sum::<f64>() / (classes - 1) as f64;
    Ok(PatientDice {
        per_class,
        mean_foreground,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturated_correct_prediction_has_near_zero_loss() {
        let labels = vec![0u8, 1, 2, 1];
        let mut logits = vec![-30.0; 3 * 4];
        for (i, &l) in labels.iter().enumerate() {
            logits[l as usize * 4 + i] = 30.0;
        }
        let (parts, _) = loss_and_grad(&logits, &[1, 3, 2, 2], &labels).unwrap();
        assert!(parts.total < 1e-5, "{parts:?}");
        assert!((parts.soft_dice - 1.0).abs() < 1e-5);
    }

    #[test]
    fn empty_class_soft_dice_is_one() {
        // class 2 absent in both truth and (saturated) prediction
        let labels = vec![0u8, 1, 0, 1];
        let mut logits = vec![-40.0; 12];
        for (i, &l) in labels.iter().enumerate() {
            logits[l as usize * 4 + i] = 40.0;
        }
        let (parts, _) = loss_and_grad(&logits, &[1, 3, 2, 2], &labels).unwrap();
        assert!((parts.soft_dice - 1.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_rejected() {
        let mut logits = vec![0.0; 12];
        logits[3] = f64::NAN;
        assert!(loss_and_grad(&logits, &[1, 3, 2, 2], &[0; 4]).is_err());
    }

    #[test]
    fn dice_examples() {
        let gt = vec![vec![0u8, 1, 1, 2]];
        let d = patient_dice(&gt, &gt, 3).unwrap();
        assert_eq!(d.per_class, vec![1.0; 3]);
        let d = patient_dice(&[vec![0u8, 0, 1, 1]], &[vec![1u8, 1, 0, 0]], 3).unwrap();
        assert_eq!(d.per_class[1], 0.0);
        assert_eq!(d.per_class[2], 1.0);
        assert!(patient_dice(&gt, &[], 3).is_err());
    }

    #[test]
    fn aggregate_dice_differs_from_slice_mean() {
        let pred = vec![vec![1u8, 1, 0, 0], vec![1u8, 0, 0, 0]];
        let gt = vec![vec![1u8, 0, 0, 0], vec![1u8, 1, 1, 1]];
        let agg = patient_dice(&pred, &gt, 2).unwrap().per_class[1];
        // TP = 2, FP = 1, FN = 3
        assert_eq!(agg, 0.5);
        let s0 = patient_dice(&pred[..1], &gt[..1], 2).unwrap().per_class[1];
        let s1 = patient_dice(&pred[1..], &gt[1..], 2).unwrap().per_class[1];
        assert!((agg - 0.5 * (s0 + s1)).abs() > 1e-3);
    }
}
