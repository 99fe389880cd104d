//! Training objectives and their gradients with respect to logits.
//!
//! Every loss is reduced by the mean over the pixels that contribute to it
//! (inlier pixels for the inlier term, outlier pixels for the outlier term),
//! so the outlier weight keeps the same meaning at any resolution.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Which cross-entropy target the inlier term distils from the frozen
/// logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CeTarget {
    /// Argmax of the frozen prediction.
    Hard,
    /// The frozen softmax distribution.
    Soft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the outlier term in `l_in + alpha * l_out`.
    pub alpha: f64,
    /// Temperature of the entropy dis-similarity regulariser.
    pub t: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Hinge baseline: inlier energies above this are penalised.
    pub hinge_margin_in: f64,
    /// Hinge baseline: outlier energies below this are penalised.
    pub hinge_margin_out: f64,
    pub ce_target: CeTarget,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            t: 1.0,
            tau: 0.10,
            hinge_margin_in: -3.0,
            hinge_margin_out: -1.0,
            ce_target: CeTarget::Hard,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return config_err(format!("alpha must be nonnegative, got {}", self.alpha));
        }
        if !(self.t > 0.0) {
            return config_err(format!("t must be positive, got {}", self.t));
        }
        if !(self.tau > 0.0) {
            return config_err(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.hinge_margin_in < self.hinge_margin_out) {
            return config_err("hinge inlier margin must lie below the outlier margin");
        }
        Ok(())
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| (v - lse).exp()).collect()
}

/// Shannon entropy (natural log) of `softmax(row)`.
pub fn entropy(row: &[f64]) -> f64 {
    let lse = log_sum_exp(row);
    -row.iter().map(|v| (v - lse).exp() * (v - lse)).sum::<f64>()
}

/// Free energy per pixel: `E(x) = -log sum_i exp(x_i)`.
pub fn energy(logits: &Tensor) -> Result<Vec<f64>> {
    if logits.c == 0 {
        return shape_err("energy needs at least one class channel");
    }
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(logits.rows().map(|r| -log_sum_exp(r)).collect())
}

/// A scalar loss and its gradient with respect to the logits it was given.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub grad: Tensor,
    /// Number of pixels that contributed.
    pub count: usize,
}

fn check_mask(logits: &Tensor, mask: &[u8]) -> Result<()> {
    if mask.len() != logits.pixels() {
        return shape_err(format!("mask has {} entries for {} pixels", mask.len(), logits.pixels()));
    }
    if mask.iter().any(|&m| m > 1) {
        return shape_err("mask must be binary");
    }
    Ok(())
}

/// Mean cross-entropy against 0-based class targets.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<LossValue> {
    if targets.len() != logits.pixels() {
        return shape_err(format!("{} targets for {} pixels", targets.len(), logits.pixels()));
    }
    if targets.iter().any(|&t| t >= logits.c) {
        return shape_err("target class out of range");
    }
    let n = targets.len().max(1) as f64;
    let mut grad = Tensor::zeros(logits.n, logits.h, logits.w, logits.c);
    let mut total = 0.0;
    for ((row, g), &t) in logits.rows().zip(grad.data.chunks_exact_mut(logits.c)).zip(targets) {
        let lse = log_sum_exp(row);
        total += lse - row[t];
        for (k, gv) in g.iter_mut().enumerate() {
            *gv = ((row[k] - lse).exp() - if k == t { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok(LossValue { value: total / n, grad, count: targets.len() })
}

/// Positive energy loss: mean over outlier pixels of `max(-E(y), 0)`.
/// Exactly zero when the mask is empty; gated to zero gradient at inliers.
pub fn positive_energy_loss(logits_hat: &Tensor, mask: &[u8]) -> Result<LossValue> {
    check_mask(logits_hat, mask)?;
    let count = mask.iter().filter(|&&m| m == 1).count();
    let mut grad = Tensor::zeros(logits_hat.n, logits_hat.h, logits_hat.w, logits_hat.c);
    if count == 0 {
        return Ok(LossValue { value: 0.0, grad, count });
    }
    let n = count as f64;
    let mut total = 0.0;
    for ((row, g), &m) in logits_hat.rows().zip(grad.data.chunks_exact_mut(logits_hat.c)).zip(mask) {
        if m == 0 {
            continue;
        }
        let lse = log_sum_exp(row);
        if lse > 0.0 {
            total += lse;
            for (gv, v) in g.iter_mut().zip(row) {
                *gv = (v - lse).exp() / n;
            }
        }
    }
    Ok(LossValue { value: total / n, grad, count })
}

/// Squared two-sided energy hinge: inlier energies above `m_in` and outlier
/// energies below `m_out` are penalised quadratically. Each side is averaged
/// over its own pixels and the two means are summed.
pub fn hinge_energy_loss(logits_hat: &Tensor, mask: &[u8], m_in: f64, m_out: f64) -> Result<LossValue> {
    check_mask(logits_hat, mask)?;
    let n_out = mask.iter().filter(|&&m| m == 1).count();
    let n_in = mask.len() - n_out;
    let mut grad = Tensor::zeros(logits_hat.n, logits_hat.h, logits_hat.w, logits_hat.c);
    let (mut sum_in, mut sum_out) = (0.0, 0.0);
    for ((row, g), &m) in logits_hat.rows().zip(grad.data.chunks_exact_mut(logits_hat.c)).zip(mask) {
        let lse = log_sum_exp(row);
        let e = -lse;
        // dE/dz = -softmax
        let coef = if m == 0 {
            let viol = (e - m_in).max(0.0);
            sum_in += viol * viol;
            -2.0 * viol / n_in as f64
        } else {
            let viol = (m_out - e).max(0.0);
            sum_out += viol * viol;
            2.0 * viol / n_out as f64
        };
        if coef != 0.0 {
            for (gv, v) in g.iter_mut().zip(row) {
                *gv = coef * (v - lse).exp();
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(LossValue { value: mean(sum_in, n_in) + mean(sum_out, n_out), grad, count: mask.len() })
}

/// The inlier approximation loss and its parts.
#[derive(Clone, Debug)]
pub struct InlierLoss {
    pub value: f64,
    /// Mean cross-entropy part.
    pub ce: f64,
    /// Mean entropy dis-similarity part.
    pub reg: f64,
    pub grad: Tensor,
    pub count: usize,
}

/// Over inlier pixels: cross-entropy of `logits_hat` against the frozen
/// prediction plus `((H(y_tilde) - H(y_hat)) / t)^2`. `logits_tilde` is a
/// constant target; no gradient is returned for it.
pub fn inlier_loss(
    logits_hat: &Tensor,
    logits_tilde: &Tensor,
    mask: &[u8],
    t: f64,
    target: CeTarget,
    dissimilarity: bool,
) -> Result<InlierLoss> {
    check_mask(logits_hat, mask)?;
    if !logits_hat.same_shape(logits_tilde) {
        return shape_err(format!("logits {:?} vs {:?}", logits_hat.shape(), logits_tilde.shape()));
    }
    if !(t > 0.0) {
        return config_err(format!("t must be positive, got {t}"));
    }
    let c = logits_hat.c;
    let count = mask.iter().filter(|&&m| m == 0).count();
    let mut grad = Tensor::zeros(logits_hat.n, logits_hat.h, logits_hat.w, c);
    if count == 0 {
        return Ok(InlierLoss { value: 0.0, ce: 0.0, reg: 0.0, grad, count });
    }
    let n = count as f64;
    let (mut ce_sum, mut reg_sum) = (0.0, 0.0);
    let mut p_tilde = vec![0.0; c];
    for (((hat, tilde), g), &m) in logits_hat
        .rows()
        .zip(logits_tilde.rows())
        .zip(grad.data.chunks_exact_mut(c))
        .zip(mask)
    {
        if m == 1 {
            continue;
        }
        let lse_hat = log_sum_exp(hat);
        let lse_tilde = log_sum_exp(tilde);
        let log_p: Vec<f64> = hat.iter().map(|v| v - lse_hat).collect();
        for (pt, v) in p_tilde.iter_mut().zip(tilde) {
            *pt = (v - lse_tilde).exp();
        }
        match target {
            CeTarget::Hard => {
                let mut best = 0;
                for k in 1..c {
                    if tilde[k] > tilde[best] {
                        best = k;
                    }
                }
                ce_sum -= log_p[best];
                for k in 0..c {
                    g[k] = log_p[k].exp() - if k == best { 1.0 } else { 0.0 };
                }
            }
            CeTarget::Soft => {
                ce_sum -= p_tilde.iter().zip(&log_p).map(|(a, b)| a * b).sum::<f64>();
                for k in 0..c {
                    g[k] = log_p[k].exp() - p_tilde[k];
                }
            }
        }
        if dissimilarity {
            let h_hat = -log_p.iter().map(|lp| lp.exp() * lp).sum::<f64>();
            let h_tilde = -p_tilde.iter().map(|p| if *p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>();
            let diff = (h_tilde - h_hat) / t;
            reg_sum += diff * diff;
            // d/dz (h_tilde - h_hat)^2 / t^2 = -2 diff / t * dH_hat/dz,
            // dH/dz_k = -p_k (log p_k + H)
            let coef = 2.0 * diff / t;
            for k in 0..c {
                let p = log_p[k].exp();
                g[k] += coef * p * (log_p[k] + h_hat);
            }
        }
        g.iter_mut().for_each(|v| *v /= n);
    }
    let (ce, reg) = (ce_sum / n, reg_sum / n);
    Ok(InlierLoss { value: ce + reg, ce, reg, grad, count })
}

/// The outlier term used in the combined loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutlierObjective {
    PositiveEnergy,
    /// Squared two-sided hinge baseline.
    HingeEnergy,
}

/// `l_rpl = l_in + alpha * l_out`.
#[derive(Clone, Debug)]
pub struct RplLoss {
    pub l_in: f64,
    pub l_out: f64,
    pub l_rpl: f64,
    pub inlier_pixels: usize,
    pub outlier_pixels: usize,
    pub grad: Tensor,
}

pub fn rpl_loss(
    logits_hat: &Tensor,
    logits_tilde: &Tensor,
    mask: &[u8],
    cfg: &LossConfig,
    objective: OutlierObjective,
    dissimilarity: bool,
) -> Result<RplLoss> {
    cfg.validate()?;
    let inl = inlier_loss(logits_hat, logits_tilde, mask, cfg.t, cfg.ce_target, dissimilarity)?;
    let out = match objective {
        OutlierObjective::PositiveEnergy => positive_energy_loss(logits_hat, mask)?,
        OutlierObjective::HingeEnergy => {
            hinge_energy_loss(logits_hat, mask, cfg.hinge_margin_in, cfg.hinge_margin_out)?
        }
    };
    let mut grad = inl.grad;
    for (g, o) in grad.data.iter_mut().zip(&out.grad.data) {
        *g += cfg.alpha * o;
    }
    let outlier_pixels = mask.iter().filter(|&&m| m == 1).count();
    Ok(RplLoss {
        l_in: inl.value,
        l_out: out.value,
        l_rpl: inl.value + cfg.alpha * out.value,
        inlier_pixels: inl.count,
        outlier_pixels,
        grad,
    })
}

/// One line of the training log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub lr: f64,
    pub l_in: f64,
    pub l_out: f64,
    pub l_rpl: f64,
    pub l_corocl: f64,
    pub total: f64,
    pub inlier_pixels: usize,
    pub outlier_pixels: usize,
    /// Sampled rows per contrastive cell, in cell order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cell_sizes: Vec<usize>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_in, self.l_out, self.l_rpl, self.l_corocl, self.total].iter().all(|v| v.is_finite())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("loss report serialises")
    }
}
