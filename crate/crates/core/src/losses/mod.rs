//! Loss values with analytic gradients.
//!
//! Distances in the triplet form ([`triplet_loss`], [`margin_satisfied`])
//! are squared; the hard-mined forms ([`hard_triplet_loss`],
//! [`hard_global_triplet_loss`], [`hard_cross_triplet_loss`]) use plain
//! Euclidean distances. A hinge sitting exactly at zero contributes no
//! gradient, and mined indices are held constant when differentiating.

mod hard;
mod identity;
mod triplet;

pub use hard::{
    hard_cross_triplet_loss, hard_global_triplet_loss, hard_pentaplet_loss, hard_triplet_loss,
    PentapletOutput,
};
pub use identity::{identity_loss, ClassifierHead, IdentityLossOutput};
pub use triplet::{margin_satisfied, triplet_loss};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sampler::CmBatch;

/// Neumaier-compensated running sum; `n` equal terms add up to the rounded `n * x`.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        self.carry += if self.sum.abs() >= x.abs() {
            (self.sum - t) + x
        } else {
            (x - t) + self.sum
        };
        self.sum = t;
    }

    pub(crate) fn value(self) -> f64 {
        self.sum + self.carry
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Hinge margin shared by the global and cross-modality terms.
    pub margin: f64,
    /// Separate margin for the cross-modality term, for ablations.
    pub cross_margin: Option<f64>,
    /// Weight of the identity term in the fused loss.
    pub identity_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            cross_margin: None,
            identity_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.margin) || !self.cross_margin.is_none_or(ok) {
            return Err(Error::Usage("margins must be finite and >= 0".into()));
        }
        if !ok(self.identity_weight) {
            return Err(Error::Usage(
                "identity weight must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn cross_margin(&self) -> f64 {
        self.cross_margin.unwrap_or(self.margin)
    }
}

/// Loss value and its gradient with respect to each input embedding row.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Matrix,
    /// Number of hinge terms strictly above zero.
    pub active_count: usize,
}

/// Fused pentaplet + identity loss, with the two gradient paths kept apart.
#[derive(Debug, Clone, PartialEq)]
pub struct HpiOutput {
    pub value: f64,
    pub pentaplet: PentapletOutput,
    pub identity: IdentityLossOutput,
    /// `identity_weight` used for the fusion.
    pub identity_weight: f64,
}

impl HpiOutput {
    /// Gradient with respect to the embeddings through the pentaplet term.
    pub fn grad_embeddings(&self) -> &Matrix {
        &self.pentaplet.total.grad
    }

    /// Gradient with respect to the logits (already scaled by the identity weight).
    pub fn grad_logits(&self) -> Matrix {
        let mut g = self.identity.grad_logits.clone();
        g.scale(self.identity_weight);
        g
    }
}

/// `L_HP + identity_weight * L_id`, both computed once.
pub fn hpi_loss(
    batch: &CmBatch,
    embeddings: &Matrix,
    logits: &Matrix,
    classes: &[usize],
    config: &LossConfig,
) -> Result<HpiOutput> {
    config.validate()?;
    let pentaplet = hard_pentaplet_loss(batch, embeddings, config)?;
    let identity = identity_loss(logits, classes)?;
    let value = pentaplet.total.value + config.identity_weight * identity.value;
    Ok(HpiOutput {
        value,
        pentaplet,
        identity,
        identity_weight: config.identity_weight,
    })
}

/// Hard triplet plus identity loss: `L_ht + identity_weight * L_id`.
/// Returns `(value, hard triplet part, identity part)`.
pub fn hard_triplet_identity_loss(
    labels: &[u32],
    embeddings: &Matrix,
    logits: &Matrix,
    classes: &[usize],
    config: &LossConfig,
) -> Result<(f64, LossOutput, IdentityLossOutput)> {
    config.validate()?;
    let ht = hard_triplet_loss(labels, embeddings, config.margin)?;
    let id = identity_loss(logits, classes)?;
    Ok((ht.value + config.identity_weight * id.value, ht, id))
}
