//! Per-step focal loss, trajectory-level dice loss and their weighted sum.
//!
//! Every function returns the loss value together with its gradient with
//! respect to the predicted probabilities, so callers can splice the loss onto
//! a tape as an external node.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor for probabilities inside logarithms and divisions.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Bce,
    Focal,
    BceDice,
    #[default]
    FocalDice,
}

impl LossVariant {
    pub fn uses_dice(self) -> bool {
        matches!(self, LossVariant::BceDice | LossVariant::FocalDice)
    }

    pub fn uses_focal(self) -> bool {
        matches!(self, LossVariant::Focal | LossVariant::FocalDice)
    }
}

/// How the positive-class weight of the focal loss is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    #[default]
    Fixed,
    /// Positive weight set to the negative-class frequency of the training labels.
    Frequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub lambda_focal: f64,
    pub lambda_dice: f64,
    pub alpha: f64,
    pub alpha_mode: AlphaMode,
    pub gamma: f64,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: LossVariant::FocalDice,
            lambda_focal: 1.0,
            lambda_dice: 0.1,
            alpha: 0.25,
            alpha_mode: AlphaMode::Fixed,
            gamma: 2.0,
            dice_eps: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Err(Error::config(format!("loss.{key}"), reason));
        if !(self.lambda_focal >= 0.0) {
            return bad("lambda_focal", format!("must be >= 0, got {}", self.lambda_focal));
        }
        if !(self.lambda_dice >= 0.0) {
            return bad("lambda_dice", format!("must be >= 0, got {}", self.lambda_dice));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha", format!("must be in (0, 1), got {}", self.alpha));
        }
        if !(self.gamma >= 0.0) {
            return bad("gamma", format!("must be >= 0, got {}", self.gamma));
        }
        if !(self.dice_eps > 0.0) {
            return bad("dice_eps", format!("must be > 0, got {}", self.dice_eps));
        }
        Ok(())
    }

    /// Applies the frequency-derived alpha when configured. `positive_fraction`
    /// is the share of positive steps in the training labels.
    pub fn resolved(&self, positive_fraction: f64) -> LossConfig {
        let mut out = self.clone();
        if self.alpha_mode == AlphaMode::Frequency && positive_fraction > 0.0 && positive_fraction < 1.0 {
            out.alpha = 1.0 - positive_fraction;
        }
        out
    }
}

/// Loss value and its gradient with respect to each probability.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check(p: &[f64], y: &[f64]) -> Result<()> {
    if p.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: y.len(),
        });
    }
    if let Some(&bad) = p.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::ProbOutOfRange(bad));
    }
    if p.is_empty() {
        return Err(Error::EmptyPrediction);
    }
    Ok(())
}

/// Symmetric binary focal loss, averaged over steps.
pub fn focal_loss(p: &[f64], y: &[f64], cfg: &LossConfig) -> Result<LossValue> {
    check(p, y)?;
    let n = p.len() as f64;
    let g = cfg.gamma;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for (&pi, &yi) in p.iter().zip(y) {
        let positive = yi > 0.5;
        let (pt, a, sign) = if positive { (pi, cfg.alpha, 1.0) } else { (1.0 - pi, 1.0 - cfg.alpha, -1.0) };
        let ptc = pt.max(LOG_CLAMP);
        let q = 1.0 - pt;
        let log_pt = ptc.ln();
        value += -a * q.powf(g) * log_pt;
        let dq = if g == 0.0 { 0.0 } else { g * q.powf(g - 1.0) * log_pt };
        let d_pt = a * (dq - q.powf(g) / ptc);
        grad.push(sign * d_pt / n);
    }
    Ok(LossValue { value: value / n, grad })
}

/// Binary cross-entropy, averaged over steps.
pub fn bce_loss(p: &[f64], y: &[f64]) -> Result<LossValue> {
    check(p, y)?;
    let n = p.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for (&pi, &yi) in p.iter().zip(y) {
        let pc = pi.max(LOG_CLAMP);
        let qc = (1.0 - pi).max(LOG_CLAMP);
        value += -(yi * pc.ln() + (1.0 - yi) * qc.ln());
        grad.push((-yi / pc + (1.0 - yi) / qc) / n);
    }
    Ok(LossValue { value: value / n, grad })
}

/// `1 - (2 sum(y p) + eps) / (sum(y) + sum(p) + eps)` over the trajectory.
pub fn dice_loss(p: &[f64], y: &[f64], cfg: &LossConfig) -> Result<LossValue> {
    check(p, y)?;
    let eps = cfg.dice_eps;
    let num = 2.0 * p.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() + eps;
    let den = y.iter().sum::<f64>() + p.iter().sum::<f64>() + eps;
    let grad = y.iter().map(|&yi| -(2.0 * yi * den - num) / (den * den)).collect();
    Ok(LossValue {
        value: 1.0 - num / den,
        grad,
    })
}

/// Weighted combination selected by `cfg.variant`. The first term (BCE or
/// focal) is weighted by `lambda_focal`, dice by `lambda_dice`.
pub fn total_loss(p: &[f64], y: &[f64], cfg: &LossConfig) -> Result<LossValue> {
    let base = if cfg.variant.uses_focal() { focal_loss(p, y, cfg)? } else { bce_loss(p, y)? };
    let mut value = cfg.lambda_focal * base.value;
    let mut grad: Vec<f64> = base.grad.iter().map(|g| cfg.lambda_focal * g).collect();
    if cfg.variant.uses_dice() {
        let d = dice_loss(p, y, cfg)?;
        value += cfg.lambda_dice * d.value;
        grad.iter_mut().zip(&d.grad).for_each(|(g, dg)| *g += cfg.lambda_dice * dg);
    }
    Ok(LossValue { value, grad })
}
