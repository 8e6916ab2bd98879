//! Substitution objective: a margin triplet loss over cosine distances mixed
//! with binary cross entropy over candidate logits.

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::neg_log_sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the triplet term; the BCE term gets `1 - alpha`.
    pub alpha: f64,
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            margin: 0.2,
        }
    }
}

impl LossConfig {
    pub fn new(alpha: f64, margin: f64) -> Result<Self> {
        let cfg = LossConfig { alpha, margin };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::validation("alpha", format!("{} is outside [0, 1]", self.alpha)));
        }
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(Error::validation("margin", format!("{} is not positive", self.margin)));
        }
        Ok(())
    }
}

/// `1 - cos(a, b)`.
pub fn cosine_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine distance of a zero vector".into()));
    }
    Ok(1.0 - a.dot(&b) / (na * nb))
}

/// Mean over negatives of `max(d_pos - d_neg + margin, 0)`.
pub fn triplet_from_distances(d_pos: f64, d_negs: &[f64], margin: f64) -> Result<f64> {
    if d_negs.is_empty() {
        return Err(Error::InvalidArgument("triplet loss needs at least one negative".into()));
    }
    if !(margin > 0.0) {
        return Err(Error::InvalidArgument(format!("margin {margin} is not positive")));
    }
    Ok(d_negs
        .iter()
        .map(|d_neg| (d_pos - d_neg + margin).max(0.0))
        .sum::<f64>()
        / d_negs.len() as f64)
}

/// Triplet loss with cosine distance, anchored at `s`.
pub fn triplet_loss(
    s: ArrayView1<f64>,
    p: ArrayView1<f64>,
    negatives: &[ArrayView1<f64>],
    margin: f64,
) -> Result<f64> {
    let d_pos = cosine_distance(s, p)?;
    let d_negs = negatives
        .iter()
        .map(|n| cosine_distance(s, *n))
        .collect::<Result<Vec<_>>>()?;
    triplet_from_distances(d_pos, &d_negs, margin)
}

/// Checks that exactly one candidate is gold and returns its index.
pub fn single_gold(gold: &[bool]) -> Result<usize> {
    let mut golds = gold.iter().enumerate().filter(|(_, g)| **g).map(|(i, _)| i);
    match (golds.next(), golds.next()) {
        (Some(i), None) => Ok(i),
        (None, _) => Err(Error::InvalidArgument("no gold candidate".into())),
        (Some(_), Some(_)) => Err(Error::InvalidArgument("more than one gold candidate".into())),
    }
}

/// Mean binary cross entropy of `sigmoid(logits)` against the gold flags.
pub fn bce_loss(logits: &[f64], gold: &[bool]) -> Result<f64> {
    if logits.is_empty() || logits.len() != gold.len() {
        return Err(Error::InvalidArgument(
            "need one gold flag per candidate and at least one candidate".into(),
        ));
    }
    single_gold(gold)?;
    Ok(logits
        .iter()
        .zip(gold)
        .map(|(&z, &y)| if y { neg_log_sigmoid(z) } else { neg_log_sigmoid(-z) })
        .sum::<f64>()
        / logits.len() as f64)
}

pub fn combined_loss(config: &LossConfig, triplet: f64, bce: f64) -> Result<f64> {
    config.validate()?;
    Ok(config.alpha * triplet + (1.0 - config.alpha) * bce)
}
