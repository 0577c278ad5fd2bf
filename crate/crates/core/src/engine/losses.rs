//! Loss terms and the fixed combination rule.
//!
//! total = 1/2 * ( 1/2 * (sup_hard + sup_corr)
//!               + w_hard * unsup_hard + w_soft * unsup_soft + w_corr * unsup_corr )
//!
//! The supervised pair always enters with equal halves; only the three
//! unsupervised terms carry configurable weights.

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::tensor::{kl_divergence, Tensor};

/// Weights of the three unsupervised terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub hard: f64,
    pub soft: f64,
    pub corr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { hard: 0.5, soft: 0.25, corr: 0.25 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("hard", self.hard), ("soft", self.soft), ("corr", self.corr)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::invalid(
                    "LossWeights",
                    format!("{name} weight {w} must be finite and non-negative"),
                ));
            }
        }
        Ok(())
    }
}

/// All five terms plus their combination, kept as graph nodes so the total
/// can drive backward.
pub struct LossBreakdown {
    pub sup_hard: Tensor,
    pub sup_corr: Tensor,
    pub unsup_hard: Tensor,
    pub unsup_soft: Tensor,
    pub unsup_corr: Tensor,
    pub weights: LossWeights,
    pub total: Tensor,
}

/// Plain-number snapshot of a breakdown, for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub sup_hard: f64,
    pub sup_corr: f64,
    pub unsup_hard: f64,
    pub unsup_soft: f64,
    pub unsup_corr: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(
        sup_hard: Tensor,
        sup_corr: Tensor,
        unsup_hard: Tensor,
        unsup_soft: Tensor,
        unsup_corr: Tensor,
        weights: LossWeights,
    ) -> Result<LossBreakdown> {
        weights.validate()?;
        let sup_half = sup_hard.add(&sup_corr)?.scale(0.5);
        let unsup = unsup_hard
            .scale(weights.hard)
            .add(&unsup_soft.scale(weights.soft))?
            .add(&unsup_corr.scale(weights.corr))?;
        let total = sup_half.add(&unsup)?.scale(0.5);
        Ok(LossBreakdown {
            sup_hard,
            sup_corr,
            unsup_hard,
            unsup_soft,
            unsup_corr,
            weights,
            total,
        })
    }

    pub fn values(&self) -> LossValues {
        LossValues {
            sup_hard: self.sup_hard.item(),
            sup_corr: self.sup_corr.item(),
            unsup_hard: self.unsup_hard.item(),
            unsup_soft: self.unsup_soft.item(),
            unsup_corr: self.unsup_corr.item(),
            total: self.total.item(),
        }
    }

    /// First non-finite term, if any, as (name, value).
    pub fn non_finite_term(&self) -> Option<(&'static str, f64)> {
        let v = self.values();
        [
            ("sup_hard", v.sup_hard),
            ("sup_corr", v.sup_corr),
            ("unsup_hard", v.unsup_hard),
            ("unsup_soft", v.unsup_soft),
            ("unsup_corr", v.unsup_corr),
            ("total", v.total),
        ]
        .into_iter()
        .find(|(_, x)| !x.is_finite())
    }
}

/// Scalar mirror of [`LossBreakdown::combine`], same operation order.
pub fn combined_total(
    sup_hard: f64,
    sup_corr: f64,
    unsup_hard: f64,
    unsup_soft: f64,
    unsup_corr: f64,
    weights: &LossWeights,
) -> f64 {
    let sup_half = (sup_hard + sup_corr) * 0.5;
    let unsup =
        unsup_hard * weights.hard + unsup_soft * weights.soft + unsup_corr * weights.corr;
    (sup_half + unsup) * 0.5
}

/// Mean of per-image scalar losses; exactly zero for an empty batch.
pub fn batch_mean(terms: &[Tensor]) -> Result<Tensor> {
    let mut iter = terms.iter();
    let Some(first) = iter.next() else {
        return Ok(Tensor::scalar(0.0));
    };
    let mut sum = first.clone();
    for t in iter {
        sum = sum.add(t)?;
    }
    Ok(sum.scale(1.0 / terms.len() as f64))
}

/// Mean cross-entropy over a batch of (logits, target) pairs.
pub fn mean_cross_entropy(logits: &[Tensor], targets: &[LabelMap]) -> Result<Tensor> {
    if logits.len() != targets.len() {
        return Err(Error::invalid(
            "mean_cross_entropy",
            format!("{} logits for {} targets", logits.len(), targets.len()),
        ));
    }
    let terms = logits
        .iter()
        .zip(targets)
        .map(|(l, t)| l.cross_entropy(t))
        .collect::<Result<Vec<_>>>()?;
    batch_mean(&terms)
}

/// Mean masked KL over a batch; targets should be detached leaves.
pub fn mean_kl(targets: &[Tensor], logits: &[Tensor], masks: &[Vec<bool>]) -> Result<Tensor> {
    if targets.len() != logits.len() || masks.len() != logits.len() {
        return Err(Error::invalid(
            "mean_kl",
            format!(
                "{} targets, {} logits, {} masks",
                targets.len(),
                logits.len(),
                masks.len()
            ),
        ));
    }
    let terms = targets
        .iter()
        .zip(logits)
        .zip(masks)
        .map(|((t, l), m)| kl_divergence(t, l, m))
        .collect::<Result<Vec<_>>>()?;
    batch_mean(&terms)
}
