//! Q-error and the training losses.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Predictions are clamped to this floor before any division.
pub const EPSILON: f64 = 1e-6;

/// `max(pred/real, real/pred) - 1`.
pub fn qerror(pred: f64, real: f64) -> Result<f64> {
    for v in [pred, real] {
        if !(v > 0.0) {
            return Err(Error::NonPositiveInput(v));
        }
    }
    Ok((pred / real).max(real / pred) - 1.0)
}

/// Mean q-error over paired slices.
pub fn mean_qerror(preds: &[f64], reals: &[f64]) -> Result<f64> {
    if preds.len() != reals.len() {
        return Err(Error::ShapeMismatch {
            expected: reals.len(),
            actual: preds.len(),
        });
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (&p, &r) in preds.iter().zip(reals) {
        sum += qerror(p, r)?;
    }
    Ok(sum / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Squared error on log rewards.
    Mse,
    /// Squared error on raw rewards, scaled by the target normalization.
    MseRaw,
    QError,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::MseRaw => "mse-raw",
            LossKind::QError => "qerror",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            LossKind::Mse => 0,
            LossKind::MseRaw => 1,
            LossKind::QError => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(LossKind::Mse),
            1 => Some(LossKind::MseRaw),
            2 => Some(LossKind::QError),
            _ => None,
        }
    }

    /// Loss and its derivative with respect to the log prediction.
    ///
    /// `log_pred` and `log_real` are natural logs; `mu`/`sigma` describe the
    /// log-reward normalization fitted on the training data.
    pub(crate) fn eval(self, log_pred: f64, log_real: f64, mu: f64, sigma: f64) -> (f64, f64) {
        let d = log_pred - log_real;
        match self {
            LossKind::Mse => {
                let s2 = sigma * sigma;
                (d * d / s2, 2.0 * d / s2)
            }
            LossKind::MseRaw => {
                let scale = mu.exp();
                let p = log_pred.exp() / scale;
                let r = log_real.exp() / scale;
                ((p - r) * (p - r), 2.0 * (p - r) * p)
            }
            LossKind::QError => {
                let e = d.abs().exp();
                (e - 1.0, d.signum() * e)
            }
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "mse-raw" => Ok(LossKind::MseRaw),
            "qerror" | "q-error" => Ok(LossKind::QError),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

/// Post-step error summary over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub mean_qloss: f64,
    pub median_qloss: f64,
    pub q90_qloss: f64,
    pub mean_l1: f64,
}

impl LossReport {
    pub fn from_pairs(preds: &[f64], reals: &[f64]) -> Result<Self> {
        if preds.is_empty() {
            return Ok(LossReport::default());
        }
        let mut q = preds
            .iter()
            .zip(reals)
            .map(|(&p, &r)| qerror(p.max(EPSILON), r))
            .collect::<Result<Vec<_>>>()?;
        let mean_qloss = q.iter().sum::<f64>() / q.len() as f64;
        q.sort_by(|a, b| a.total_cmp(b));
        let mean_l1 = preds.iter().zip(reals).map(|(p, r)| (p - r).abs()).sum::<f64>() / preds.len() as f64;
        Ok(LossReport {
            mean_qloss,
            median_qloss: quantile(&q, 0.5),
            q90_qloss: quantile(&q, 0.9),
            mean_l1,
        })
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}
