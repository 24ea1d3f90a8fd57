use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{smooth_l1_value, softmax_into, Graph, NodeId};

/// Mixing weights of the occluder and occludee branch losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossWeights {
    /// `lambda2 = 1 - lambda1`.
    pub fn from_lambda1(lambda1: f64) -> Result<Self> {
        let w = Self { lambda1, lambda2: 1.0 - lambda1 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && ((self.lambda1 + self.lambda2) - 1.0).abs() <= 1e-12;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "loss weights ({}, {}) must be non-negative and sum to 1",
                self.lambda1, self.lambda2
            )))
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.5, lambda2: 0.5 }
    }
}

/// Per-term values of one training objective evaluation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub occluder_cls: f64,
    pub occluder_bbox: f64,
    /// `(cls_i, bbox_i)` for expansions `i = 0..=k`.
    pub occludee_terms: Vec<(f64, f64)>,
    /// Weighted detection-head loss.
    pub total: f64,
    /// Proposal network terms, optimized alongside `total`.
    pub rpn_objectness: f64,
    pub rpn_bbox: f64,
}

impl LossBreakdown {
    pub fn occluder(&self) -> f64 {
        self.occluder_cls + self.occluder_bbox
    }

    pub fn occludee(&self) -> f64 {
        self.occludee_terms.iter().map(|(c, b)| c + b).sum()
    }

    /// Everything the optimizer minimizes.
    pub fn objective(&self) -> f64 {
        self.total + self.rpn_objectness + self.rpn_bbox
    }

    /// Mean of several breakdowns with the same number of expansions.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let k = items.first().map_or(0, |b| b.occludee_terms.len());
        let mut out = LossBreakdown { occludee_terms: vec![(0.0, 0.0); k], ..Default::default() };
        for b in items {
            out.occluder_cls += b.occluder_cls / n;
            out.occluder_bbox += b.occluder_bbox / n;
            out.total += b.total / n;
            out.rpn_objectness += b.rpn_objectness / n;
            out.rpn_bbox += b.rpn_bbox / n;
            for (o, t) in out.occludee_terms.iter_mut().zip(&b.occludee_terms) {
                o.0 += t.0 / n;
                o.1 += t.1 / n;
            }
        }
        out
    }
}

/// `total = lambda1 * (cls + bbox) + lambda2 * sum_i (cls_i + bbox_i)`.
pub fn total_loss(occluder: (f64, f64), occludee_terms: &[(f64, f64)], weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    let occludee: f64 = occludee_terms.iter().map(|(c, b)| c + b).sum();
    Ok(LossBreakdown {
        occluder_cls: occluder.0,
        occluder_bbox: occluder.1,
        occludee_terms: occludee_terms.to_vec(),
        total: weights.lambda1 * (occluder.0 + occluder.1) + weights.lambda2 * occludee,
        rpn_objectness: 0.0,
        rpn_bbox: 0.0,
    })
}

/// Graph version of [`total_loss`]. Zero-weighted terms are left off the
/// tape, so a branch with weight 0 receives no gradient.
pub fn total_loss_node(g: &mut Graph, occluder: (NodeId, NodeId), occludee_terms: &[(NodeId, NodeId)], weights: &LossWeights) -> NodeId {
    let mut terms = vec![(occluder.0, weights.lambda1), (occluder.1, weights.lambda1)];
    for &(c, b) in occludee_terms {
        terms.push((c, weights.lambda2));
        terms.push((b, weights.lambda2));
    }
    g.weighted_sum(&terms)
}

/// Value-level branch loss: mean cross-entropy of `logits` rows against
/// `classes`, and smooth-L1 (summed over the 4 deltas) averaged over rows with
/// a regression target.
pub fn branch_loss(logits: &[Vec<f64>], classes: &[usize], deltas: &[[f64; 4]], targets: &[Option<[f64; 4]>], beta: f64) -> (f64, f64) {
    let mut cls = 0.0;
    for (z, &c) in logits.iter().zip(classes) {
        let mut p = vec![0.0; z.len()];
        softmax_into(z, &mut p);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|&a| (a - max).exp()).sum::<f64>().ln();
        cls += lse - z[c];
    }
    if !logits.is_empty() {
        cls /= logits.len() as f64;
    }
    let mut bbox = 0.0;
    let mut n_fg = 0;
    for (d, t) in deltas.iter().zip(targets) {
        if let Some(t) = t {
            bbox += d.iter().zip(t).map(|(a, b)| smooth_l1_value(a - b, beta)).sum::<f64>();
            n_fg += 1;
        }
    }
    if n_fg > 0 {
        bbox /= n_fg as f64;
    }
    (cls, bbox)
}
