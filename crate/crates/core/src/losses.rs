//! Training objectives. Every loss here is minimized.
//!
//! The adversarial terms take discriminator probabilities, clamped to
//! `[PROB_EPS, 1 - PROB_EPS]` before the logarithm. The generator uses the
//! non-saturating `-log D(x_trans)` form.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::PROB_EPS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DistMetric {
    /// Mean absolute difference.
    #[default]
    L1,
    /// Mean squared difference.
    L2,
    /// Mean Huber penalty with threshold `delta`.
    Huber { delta: f64 },
}

/// Which image the attribute-consistency output is pulled towards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttrTarget {
    /// The reference image the slot came from.
    #[default]
    Reference,
    /// The translated image.
    Transferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    #[serde(default)]
    pub dist: DistMetric,
    #[serde(default)]
    pub attr_target: AttrTarget,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let w = Self {
            lambda1,
            lambda2,
            lambda3,
            dist: DistMetric::L1,
            attr_target: AttrTarget::Reference,
        };
        w.validate()?;
        Ok(w)
    }

    /// `(1, 10, 10)`.
    pub fn instance_default() -> Self {
        Self::new(1.0, 10.0, 10.0).expect("valid weights")
    }

    /// `(1, 10, 0)`.
    pub fn domain_default() -> Self {
        Self::new(1.0, 10.0, 0.0).expect("valid weights")
    }

    /// Two-term blend `alpha * reconstruction + (1 - alpha) * adversarial`,
    /// i.e. `(1 - alpha, alpha, 0)`.
    pub fn from_alpha(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Validation(format!("alpha {alpha} outside [0, 1]")));
        }
        Self::new(1.0 - alpha, alpha, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let ls = [self.lambda1, self.lambda2, self.lambda3];
        if ls.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Validation(format!("loss weights must be finite and non-negative: {ls:?}")));
        }
        if ls.iter().all(|&l| l == 0.0) {
            return Err(Error::Validation("at least one loss weight must be positive".into()));
        }
        if let DistMetric::Huber { delta } = self.dist {
            if !(delta > 0.0 && delta.is_finite()) {
                return Err(Error::Validation(format!("huber delta {delta} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub transfer: f64,
    pub back: f64,
    pub attr: f64,
    pub generator_total: f64,
    pub discriminator: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.transfer, self.back, self.attr, self.generator_total, self.discriminator]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn non_empty(p: &Tensor, what: &str) -> Result<()> {
    if p.elem_count() == 0 {
        return Err(Error::Validation(format!("empty batch for {what}")));
    }
    Ok(())
}

fn safe_log(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS)?.log()?)
}

/// `-mean(log p)` over discriminator outputs on translated images.
pub fn transfer_loss(d_probs_on_trans: &Tensor) -> Result<Tensor> {
    non_empty(d_probs_on_trans, "transfer loss")?;
    Ok(safe_log(d_probs_on_trans)?.mean_all()?.neg()?)
}

/// `-mean(log(1 - p_trans)) - mean(log p_real)`.
pub fn discriminator_loss(d_probs_on_trans: &Tensor, d_probs_on_real: &Tensor) -> Result<Tensor> {
    non_empty(d_probs_on_trans, "discriminator loss")?;
    non_empty(d_probs_on_real, "discriminator loss")?;
    let fake = safe_log(&d_probs_on_trans.affine(-1.0, 1.0)?)?.mean_all()?;
    let real = safe_log(d_probs_on_real)?.mean_all()?;
    Ok((fake + real)?.neg()?)
}

/// Mean element-wise distance between two equally shaped batches.
pub fn distance(a: &Tensor, b: &Tensor, metric: DistMetric) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("distance between {:?} and {:?}", a.dims(), b.dims())));
    }
    non_empty(a, "distance")?;
    let d = (a - b)?;
    Ok(match metric {
        DistMetric::L1 => d.abs()?.mean_all()?,
        DistMetric::L2 => d.sqr()?.mean_all()?,
        DistMetric::Huber { delta } => {
            let ad = d.abs()?;
            let inner = ad.clamp(0.0, delta)?;
            // 0.5 * min(|d|, delta)^2 + delta * (|d| - min(|d|, delta))
            ((inner.sqr()? * 0.5)? + ((ad - &inner)? * delta)?)?.mean_all()?
        }
    })
}

pub fn back_transfer_loss(x_src: &Tensor, x_back: &Tensor, metric: DistMetric) -> Result<Tensor> {
    distance(x_src, x_back, metric)
}

pub fn attribute_consistency_loss(x_attr: &Tensor, x_target: &Tensor, metric: DistMetric) -> Result<Tensor> {
    distance(x_attr, x_target, metric)
}

/// `lambda1 * transfer + lambda2 * back + lambda3 * attr`.
pub fn generation_loss(transfer: f64, back: f64, attr: f64, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    let parts = [transfer, back, attr];
    if parts.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("non-finite loss component in {parts:?}")));
    }
    let mut total = weights.lambda1 * transfer + weights.lambda2 * back;
    if weights.lambda3 != 0.0 {
        total += weights.lambda3 * attr;
    }
    Ok(total)
}

/// Differentiable counterpart of [`generation_loss`]; a missing
/// attribute term contributes nothing.
pub fn generation_loss_tensor(
    transfer: &Tensor,
    back: &Tensor,
    attr: Option<&Tensor>,
    weights: &LossWeights,
) -> Result<Tensor> {
    let mut total = ((transfer * weights.lambda1)? + (back * weights.lambda2)?)?;
    if let Some(a) = attr {
        if weights.lambda3 != 0.0 {
            total = (total + (a * weights.lambda3)?)?;
        }
    }
    Ok(total)
}
