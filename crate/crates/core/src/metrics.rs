//! Evaluation metrics and the downstream training losses.

use crate::contrastive::logsumexp;
use crate::error::{Error, Result};

fn check_len(a: usize, b: usize, min: usize) -> Result<()> {
    if a != b {
        return Err(Error::Argument(format!("length mismatch: {a} vs {b}")));
    }
    if a < min {
        return Err(Error::Argument(format!("need at least {min} values, got {a}")));
    }
    Ok(())
}

/// Cross-entropy under the balanced softmax `n_k e^{z_k} / Σ n_j e^{z_j}`.
pub fn balanced_softmax_ce(logits: &[f64], label: usize, class_counts: &[f64]) -> Result<f64> {
    Ok(balanced_softmax_ce_grad(logits, label, class_counts)?.0)
}

/// Loss and gradient with respect to the logits.
pub fn balanced_softmax_ce_grad(
    logits: &[f64],
    label: usize,
    class_counts: &[f64],
) -> Result<(f64, Vec<f64>)> {
    check_len(logits.len(), class_counts.len(), 1)?;
    if label >= logits.len() {
        return Err(Error::Argument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    if class_counts.iter().any(|&n| !(n >= 1.0)) {
        return Err(Error::Argument("class counts must be >= 1".into()));
    }
    let shifted: Vec<f64> = logits
        .iter()
        .zip(class_counts)
        .map(|(z, n)| z + n.ln())
        .collect();
    let lse = logsumexp(shifted.iter().copied());
    let loss = lse - shifted[label];
    let grad = shifted
        .iter()
        .enumerate()
        .map(|(k, s)| (s - lse).exp() - if k == label { 1.0 } else { 0.0 })
        .collect();
    Ok((loss, grad))
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

struct Moments {
    mx: f64,
    my: f64,
    vx: f64,
    vy: f64,
    cov: f64,
}

fn moments(x: &[f64], y: &[f64]) -> Moments {
    let (mx, my) = (mean(x), mean(y));
    let n = x.len() as f64;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cov += (a - mx) * (b - my);
    }
    Moments {
        mx,
        my,
        vx: vx / n,
        vy: vy / n,
        cov: cov / n,
    }
}

/// Concordance correlation coefficient with population moments.
pub fn ccc(pred: &[f64], target: &[f64]) -> Result<f64> {
    Ok(ccc_grad(pred, target)?.0)
}

/// CCC and its gradient with respect to `pred`.
pub fn ccc_grad(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len(pred.len(), target.len(), 2)?;
    let m = moments(pred, target);
    if !(m.vy > 0.0) {
        return Err(Error::Argument("target variance is zero".into()));
    }
    let d = m.vx + m.vy + (m.mx - m.my).powi(2);
    let c = 2.0 * m.cov / d;
    let n = pred.len() as f64;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(x, y)| {
            let dcov = (y - m.my) / n;
            let dd = 2.0 * (x - m.mx) / n + 2.0 * (m.mx - m.my) / n;
            2.0 * (dcov * d - m.cov * dd) / (d * d)
        })
        .collect();
    Ok((c, grad))
}

/// `1 − (CCC_v + CCC_a) / 2`.
pub fn ccc_loss(pred_v: &[f64], pred_a: &[f64], target_v: &[f64], target_a: &[f64]) -> Result<f64> {
    Ok(ccc_loss_grad(pred_v, pred_a, target_v, target_a)?.0)
}

/// Loss plus gradients with respect to the valence and arousal predictions.
pub fn ccc_loss_grad(
    pred_v: &[f64],
    pred_a: &[f64],
    target_v: &[f64],
    target_a: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (cv, gv) = ccc_grad(pred_v, target_v)?;
    let (ca, ga) = ccc_grad(pred_a, target_a)?;
    Ok((
        1.0 - 0.5 * (cv + ca),
        gv.into_iter().map(|g| -0.5 * g).collect(),
        ga.into_iter().map(|g| -0.5 * g).collect(),
    ))
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_len(pred.len(), target.len(), 1)?;
    let mse = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(mse.sqrt())
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Argument(format!("label {l} out of range for {classes} classes")));
    }
    Ok(())
}

/// Unweighted mean of per-class F1; a class with no true or predicted
/// members scores 0.
pub fn macro_f1(preds: &[usize], targets: &[usize], classes: usize) -> Result<f64> {
    check_len(preds.len(), targets.len(), 1)?;
    if classes == 0 {
        return Err(Error::Argument("need at least one class".into()));
    }
    check_labels(preds, classes)?;
    check_labels(targets, classes)?;
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &t) in preds.iter().zip(targets) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let total: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / classes as f64)
}

pub fn accuracy(preds: &[usize], targets: &[usize]) -> Result<f64> {
    check_len(preds.len(), targets.len(), 1)?;
    let hits = preds.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// Distance threshold maximizing verification accuracy (`same` iff
/// `d <= threshold`); ties go to the smallest threshold.
pub fn calibrate_threshold(distances: &[f64], same: &[bool]) -> Result<f64> {
    check_len(distances.len(), same.len(), 1)?;
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]));
    // Threshold below everything: all predicted different.
    let mut correct = same.iter().filter(|s| !**s).count();
    let mut best = (correct, distances[order[0]] - 1.0);
    let mut i = 0;
    while i < order.len() {
        let d = distances[order[i]];
        while i < order.len() && distances[order[i]] == d {
            if same[order[i]] {
                correct += 1;
            } else {
                correct -= 1;
            }
            i += 1;
        }
        if correct > best.0 {
            best = (correct, d);
        }
    }
    Ok(best.1)
}

pub fn verification_accuracy(distances: &[f64], same: &[bool], threshold: f64) -> Result<f64> {
    check_len(distances.len(), same.len(), 1)?;
    let hits = distances
        .iter()
        .zip(same)
        .filter(|(d, s)| (**d <= threshold) == **s)
        .count();
    Ok(hits as f64 / distances.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;
    use rand::Rng as _;

    #[test]
    fn balanced_softmax_examples() {
        let z = [0.3, -1.2, 2.0];
        let plain = logsumexp(z.iter().copied()) - z[1];
        let b = balanced_softmax_ce(&z, 1, &[5.0, 5.0, 5.0]).unwrap();
        assert!((plain - b).abs() < 1e-9);
        let l = balanced_softmax_ce(&[0.7, 0.7], 0, &[1.0, 3.0]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let lo = balanced_softmax_ce(&[1.0, 0.0], 0, &[2.0, 3.0]).unwrap();
        let hi = balanced_softmax_ce(&[0.5, 0.0], 0, &[2.0, 3.0]).unwrap();
        assert!(lo < hi);
        assert!(balanced_softmax_ce(&z, 3, &[1.0; 3]).is_err());
        assert!(balanced_softmax_ce(&z, 0, &[0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn ccc_examples() {
        let t = [0.1, -0.4, 0.9, 0.3];
        assert!((ccc(&t, &t).unwrap() - 1.0).abs() < 1e-12);
        let x = [1.0, -1.0, 2.0, -2.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((ccc(&neg, &x).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(ccc(&[0.2; 4], &t).unwrap(), 0.0);
        assert!(ccc(&[0.0; 3], &t).is_err());
        assert!(ccc(&t, &[1.0; 4]).is_err());
    }

    #[test]
    fn rmse_and_f1_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let t = [0.1, 0.5, -0.2];
        let p: Vec<f64> = t.iter().map(|v| v + 0.3).collect();
        assert!((rmse(&p, &t).unwrap() - 0.3).abs() < 1e-12);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(macro_f1(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap(), 1.0);
        assert!((macro_f1(&[1, 1, 0, 0], &[1, 0, 1, 0], 2).unwrap() - 0.5).abs() < 1e-12);
        assert!((macro_f1(&[0; 4], &[0, 0, 1, 1], 2).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(macro_f1(&[0, 2], &[0, 1], 2).is_err());
    }

    #[test]
    fn ccc_loss_gradient_matches_finite_differences() {
        let mut r = rng(3);
        for _ in 0..5 {
            let n = 32;
            let mut v: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())
                .collect();
            let (_, gv, ga) = ccc_loss_grad(&v[0], &v[1], &v[2], &v[3]).unwrap();
            let h = 1e-6;
            for (which, g) in [(0usize, &gv), (1, &ga)] {
                for i in 0..n {
                    let x0 = v[which][i];
                    v[which][i] = x0 + h;
                    let up = ccc_loss(&v[0], &v[1], &v[2], &v[3]).unwrap();
                    v[which][i] = x0 - h;
                    let dn = ccc_loss(&v[0], &v[1], &v[2], &v[3]).unwrap();
                    v[which][i] = x0;
                    let fd = (up - dn) / (2.0 * h);
                    assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-3));
                }
            }
        }
    }

    #[test]
    fn threshold_calibration() {
        let d = [0.1, 0.2, 0.9, 1.0];
        let s = [true, true, false, false];
        let t = calibrate_threshold(&d, &s).unwrap();
        assert!((0.2..0.9).contains(&t));
        assert_eq!(verification_accuracy(&d, &s, t).unwrap(), 1.0);
        let t0 = calibrate_threshold(&[0.0, 0.0], &[true, true]).unwrap();
        assert_eq!(verification_accuracy(&[0.0, 0.0], &[true, true], t0).unwrap(), 1.0);
    }
}
