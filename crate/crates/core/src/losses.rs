//! Classification and regression losses with closed-form gradients.
//!
//! Two classification heads are supported:
//!
//! * softmax over the `K + 1` slots with `KL(target || p)`, a single-peak
//!   distribution;
//! * independent sigmoids per slot with the soft-target focal loss, which
//!   allows several slots to be confident at once.
//!
//! Regression uses an L1 loss on box deltas scaled by the certainty
//! `1 - u`.

use serde::{Deserialize, Serialize};

use crate::error::{check_closed, Error, Result};
use crate::geometry::BBox;

/// Probability clamp applied before every logarithm in the focal loss.
pub const PROB_EPS: f64 = 1e-7;

/// Running sum with Neumaier compensation, so that batch reductions do not
/// depend on summation order beyond ~1e-16 relative.
#[derive(Debug, Default, Clone, Copy)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: CompensatedSum) {
        self.add(other.sum);
        self.add(other.carry);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    values.into_iter().collect::<CompensatedSum>().value()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total = compensated_sum(exps.iter().copied());
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + compensated_sum(logits.iter().map(|z| (z - max).exp())).ln();
    logits.iter().map(|z| z - lse).collect()
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}

/// `KL(target || probs)` with `0 ln 0 = 0`.
pub fn kl_soft_ce(target: &[f64], probs: &[f64]) -> Result<f64> {
    check_len(target.len(), probs.len())?;
    let mut sum = CompensatedSum::default();
    for (slot, (&y, &p)) in target.iter().zip(probs).enumerate() {
        if y > 0.0 {
            if p <= 0.0 {
                return Err(Error::InfiniteDivergence { slot, target: y });
            }
            sum.add(y * (y / p).ln());
        }
    }
    Ok(sum.value().max(0.0))
}

/// KL against `softmax(logits)` and its gradient with respect to the logits,
/// `softmax(z) - target` (the target sums to one).
pub fn kl_softmax_with_grad(target: &[f64], logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len(target.len(), logits.len())?;
    let log_p = log_softmax(logits);
    let loss = compensated_sum(
        target
            .iter()
            .zip(&log_p)
            .filter(|(y, _)| **y > 0.0)
            .map(|(&y, &lp)| y * (y.ln() - lp)),
    );
    let grad = target
        .iter()
        .zip(&log_p)
        .map(|(&y, &lp)| lp.exp() - y)
        .collect();
    Ok((loss.max(0.0), grad))
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn focal_term(y: f64, p: f64, gamma: f64) -> f64 {
    let p = clamp_prob(p);
    -(y * (1.0 - p).powf(gamma) * p.ln() + (1.0 - y) * p.powf(gamma) * (1.0 - p).ln())
}

/// Soft-target focal loss over independent per-slot probabilities:
/// `-sum_k [ y_k (1-p_k)^g ln p_k + (1-y_k) p_k^g ln(1-p_k) ]`.
///
/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn soft_focal(target: &[f64], probs: &[f64], gamma: f64) -> Result<f64> {
    check_len(target.len(), probs.len())?;
    check_closed("gamma", gamma, 0.0, f64::MAX, "[0, inf)")?;
    Ok(compensated_sum(
        target
            .iter()
            .zip(probs)
            .map(|(&y, &p)| focal_term(y, p, gamma)),
    ))
}

/// Soft binary cross-entropy per slot, same clamp as [`soft_focal`].
pub fn soft_bce(target: &[f64], probs: &[f64]) -> Result<f64> {
    check_len(target.len(), probs.len())?;
    Ok(compensated_sum(target.iter().zip(probs).map(|(&y, &p)| {
        let p = clamp_prob(p);
        -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
    })))
}

/// Focal loss on `sigmoid(logits)` and its gradient with respect to the logits.
///
/// Per slot, with `p = sigmoid(z)`:
/// `dL/dz = y (1-p)^g (g p ln p - (1-p)) + (1-y) p^g (p - g (1-p) ln(1-p))`.
/// Where the clamp is active the gradient is zero.
pub fn focal_sigmoid_with_grad(
    target: &[f64],
    logits: &[f64],
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    check_len(target.len(), logits.len())?;
    check_closed("gamma", gamma, 0.0, f64::MAX, "[0, inf)")?;
    let mut loss = CompensatedSum::default();
    let mut grad = Vec::with_capacity(logits.len());
    for (&y, &z) in target.iter().zip(logits) {
        let raw = sigmoid(z);
        let p = clamp_prob(raw);
        loss.add(focal_term(y, p, gamma));
        if p != raw {
            grad.push(0.0);
            continue;
        }
        let q = 1.0 - p;
        let pos = if y != 0.0 {
            y * q.powf(gamma) * (gamma * p * p.ln() - q)
        } else {
            0.0
        };
        let neg = if y != 1.0 {
            (1.0 - y) * p.powf(gamma) * (p - gamma * q * q.ln())
        } else {
            0.0
        };
        grad.push(pos + neg);
    }
    Ok((loss.value(), grad))
}

/// Box regression target in center-offset / log-size form relative to a
/// reference (proposal) box.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn encode(reference: &BBox, target: &BBox) -> Self {
        let (rx, ry) = reference.center();
        let (tx, ty) = target.center();
        let (rw, rh) = (reference.width(), reference.height());
        Self {
            dx: (tx - rx) / rw,
            dy: (ty - ry) / rh,
            dw: (target.width() / rw).ln(),
            dh: (target.height() / rh).ln(),
        }
    }

    pub fn decode(&self, reference: &BBox) -> Result<BBox> {
        let (rx, ry) = reference.center();
        let (rw, rh) = (reference.width(), reference.height());
        BBox::from_center(
            rx + self.dx * rw,
            ry + self.dy * rh,
            rw * self.dw.exp(),
            rh * self.dh.exp(),
        )
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            dx: a[0],
            dy: a[1],
            dw: a[2],
            dh: a[3],
        }
    }

    pub fn l1(&self, other: &BoxDelta) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

/// `(1 - u_beta) * |pred - target|_1`.
pub fn weighted_l1(pred: &BoxDelta, target: &BoxDelta, u_beta: f64) -> Result<f64> {
    check_closed("u_beta", u_beta, 0.0, 1.0, "[0, 1]")?;
    Ok((1.0 - u_beta) * pred.l1(target))
}

/// Subgradient of [`weighted_l1`] with respect to `pred` (0 at ties).
pub fn weighted_l1_grad(pred: &BoxDelta, target: &BoxDelta, u_beta: f64) -> [f64; 4] {
    let w = 1.0 - u_beta;
    let p = pred.to_array();
    let t = target.to_array();
    std::array::from_fn(|i| {
        let d = p[i] - t[i];
        if d > 0.0 {
            w
        } else if d < 0.0 {
            -w
        } else {
            0.0
        }
    })
}

/// Floor on the denominator of [`grad_check`]'s relative error, so that
/// components where both gradients vanish compare as equal.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Worst relative discrepancy between an analytic gradient and central
/// finite differences with step `h`:
/// `max_i |g_i - fd_i| / max(|g_i|, |fd_i|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F, G>(loss: F, gradient: G, point: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let analytic = gradient(point);
    assert_eq!(analytic.len(), point.len(), "gradient length mismatch");
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        x[i] = point[i] + h;
        let up = loss(&x);
        x[i] = point[i] - h;
        let down = loss(&x);
        x[i] = point[i];
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}
