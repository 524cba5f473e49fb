use crate::distance::{accumulate_distance_grad, pairwise_distances};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mining::{mine_batch, HardestPentaplet};
use crate::sampler::CmBatch;

use super::{CompensatedSum, LossConfig, LossOutput};

/// Hard pentaplet loss plus its two raw components from the same mining pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PentapletOutput {
    /// `(global.value + cross.value) / 2PK`, gradients scaled alike.
    pub total: LossOutput,
    pub global: LossOutput,
    pub cross: LossOutput,
    pub pentaplets: Vec<HardestPentaplet>,
}

fn check_rows(batch: &CmBatch, embeddings: &Matrix) -> Result<()> {
    if embeddings.rows() != batch.len() {
        return Err(Error::Input(format!(
            "{} embedding rows for a batch of {}",
            embeddings.rows(),
            batch.len()
        )));
    }
    Ok(())
}

/// Sums `[margin + d(a, pos) - d(a, neg)]_+` over `(anchor, pos, d_pos, neg, d_neg)` terms.
fn hinge_sum(
    embeddings: &Matrix,
    terms: impl Iterator<Item = (usize, usize, f64, usize, f64)>,
    margin: f64,
) -> LossOutput {
    let mut grad = Matrix::zeros(embeddings.rows(), embeddings.cols());
    let mut value = CompensatedSum::default();
    let mut active_count = 0;
    for (a, p, dp, n, dn) in terms {
        let term = margin + dp - dn;
        if term > 0.0 {
            value.add(term);
            active_count += 1;
            let ea = embeddings.row(a);
            accumulate_distance_grad(ea, embeddings.row(p), dp, 1.0, &mut grad, a, p);
            accumulate_distance_grad(ea, embeddings.row(n), dn, -1.0, &mut grad, a, n);
        }
    }
    LossOutput {
        value: value.value(),
        grad,
        active_count,
    }
}

fn global_part(embeddings: &Matrix, mined: &[HardestPentaplet], margin: f64) -> LossOutput {
    hinge_sum(
        embeddings,
        mined.iter().map(|t| {
            (
                t.anchor,
                t.global_pos,
                t.d_global_pos(),
                t.global_neg,
                t.d_global_neg(),
            )
        }),
        margin,
    )
}

fn cross_part(embeddings: &Matrix, mined: &[HardestPentaplet], margin: f64) -> LossOutput {
    hinge_sum(
        embeddings,
        mined.iter().map(|t| {
            (
                t.anchor,
                t.cross_pos,
                t.d_cross_pos(),
                t.cross_neg,
                t.d_cross_neg(),
            )
        }),
        margin,
    )
}

fn mine(batch: &CmBatch, embeddings: &Matrix) -> Result<Vec<HardestPentaplet>> {
    check_rows(batch, embeddings)?;
    let dmat = pairwise_distances(embeddings)?;
    mine_batch(batch, &dmat)
}

/// Raw sum over every anchor of the hardest global hinge.
pub fn hard_global_triplet_loss(
    batch: &CmBatch,
    embeddings: &Matrix,
    margin: f64,
) -> Result<LossOutput> {
    let mined = mine(batch, embeddings)?;
    Ok(global_part(embeddings, &mined, margin))
}

/// Raw sum over every anchor of the hardest cross-modality hinge.
pub fn hard_cross_triplet_loss(
    batch: &CmBatch,
    embeddings: &Matrix,
    margin: f64,
) -> Result<LossOutput> {
    let mined = mine(batch, embeddings)?;
    Ok(cross_part(embeddings, &mined, margin))
}

/// `(L_hgt + L_hct) / 2PK` from one mining pass.
pub fn hard_pentaplet_loss(
    batch: &CmBatch,
    embeddings: &Matrix,
    config: &LossConfig,
) -> Result<PentapletOutput> {
    let pentaplets = mine(batch, embeddings)?;
    let global = global_part(embeddings, &pentaplets, config.margin);
    let cross = cross_part(embeddings, &pentaplets, config.cross_margin());
    let norm = batch.spec.batch_size() as f64;
    let mut grad = global.grad.clone();
    grad.add_scaled(&cross.grad, 1.0);
    grad.scale(1.0 / norm);
    let total = LossOutput {
        value: (global.value + cross.value) / norm,
        grad,
        active_count: global.active_count + cross.active_count,
    };
    Ok(PentapletOutput {
        total,
        global,
        cross,
        pentaplets,
    })
}

/// Modality-blind batch-hard triplet loss over arbitrary labels (raw sum over anchors).
pub fn hard_triplet_loss(labels: &[u32], embeddings: &Matrix, margin: f64) -> Result<LossOutput> {
    if labels.len() != embeddings.rows() {
        return Err(Error::Input(format!(
            "{} labels for {} embeddings",
            labels.len(),
            embeddings.rows()
        )));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Input(
            "hard triplet loss needs at least 2 identities".into(),
        ));
    }
    let dmat = pairwise_distances(embeddings)?;
    let n = labels.len();
    let terms = (0..n).map(|a| {
        let row = dmat.row(a);
        // With no other positive the anchor itself is the positive (distance 0).
        let mut pos = a;
        let mut neg = usize::MAX;
        for j in 0..n {
            if labels[j] == labels[a] {
                if j != a && (pos == a || row[j] > row[pos]) {
                    pos = j;
                }
            } else if neg == usize::MAX || row[j] < row[neg] {
                neg = j;
            }
        }
        (a, pos, row[pos], neg, row[neg])
    });
    Ok(hinge_sum(embeddings, terms, margin))
}
