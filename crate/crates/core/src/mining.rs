//! Hardest-example mining inside a cm-batch.
//!
//! For each anchor: the farthest same-identity sample and the nearest
//! other-identity sample over the whole batch (global pair), and the same
//! pair restricted to samples of the opposite modality (cross pair).
//! Ties go to the lowest batch position.

use crate::distance::DistanceMatrix;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::sampler::CmBatch;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardestPentaplet {
    pub anchor: usize,
    pub global_pos: usize,
    pub global_neg: usize,
    pub cross_pos: usize,
    pub cross_neg: usize,
    /// Distances from the anchor to `global_pos`, `global_neg`, `cross_pos`, `cross_neg`.
    pub distances: [f64; 4],
}

impl HardestPentaplet {
    pub fn d_global_pos(&self) -> f64 {
        self.distances[0]
    }
    pub fn d_global_neg(&self) -> f64 {
        self.distances[1]
    }
    pub fn d_cross_pos(&self) -> f64 {
        self.distances[2]
    }
    pub fn d_cross_neg(&self) -> f64 {
        self.distances[3]
    }
}

fn check(batch: &CmBatch, dmat: &DistanceMatrix) -> Result<()> {
    if dmat.len() != batch.len() {
        return Err(Error::Input(format!(
            "distance matrix is {}x{} but batch has {} positions",
            dmat.len(),
            dmat.len(),
            batch.len()
        )));
    }
    Ok(())
}

/// Scans `candidates` in ascending order keeping the first strict extremum.
fn select(row: &[f64], candidates: impl Iterator<Item = usize>, farthest: bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for c in candidates {
        best = match best {
            None => Some(c),
            Some(b) if (farthest && row[c] > row[b]) || (!farthest && row[c] < row[b]) => Some(c),
            keep => keep,
        };
    }
    best
}

fn range_check(batch: &CmBatch, anchor: usize) -> Result<()> {
    if anchor >= batch.len() {
        return Err(Error::Input(format!(
            "anchor {anchor} outside batch of {}",
            batch.len()
        )));
    }
    Ok(())
}

/// Hardest global positive (either modality, excluding the anchor) and negative.
pub fn mine_global(
    batch: &CmBatch,
    dmat: &DistanceMatrix,
    anchor: usize,
) -> Result<(usize, usize)> {
    check(batch, dmat)?;
    range_check(batch, anchor)?;
    Ok(mine_global_unchecked(batch, dmat, anchor))
}

fn mine_global_unchecked(batch: &CmBatch, dmat: &DistanceMatrix, anchor: usize) -> (usize, usize) {
    let row = dmat.row(anchor);
    let block = batch.block_of(anchor);
    let n = batch.len();
    let pos = select(
        row,
        (0..n).filter(|&j| j != anchor && batch.block_of(j) == block),
        true,
    );
    let neg = select(row, (0..n).filter(|&j| batch.block_of(j) != block), false);
    // K >= 1 and P >= 2 guarantee both candidate sets are non-empty.
    (pos.expect("positive exists"), neg.expect("negative exists"))
}

/// Hardest positive and negative among samples of the anchor's opposite modality.
pub fn mine_cross(batch: &CmBatch, dmat: &DistanceMatrix, anchor: usize) -> Result<(usize, usize)> {
    check(batch, dmat)?;
    range_check(batch, anchor)?;
    Ok(mine_cross_unchecked(batch, dmat, anchor))
}

fn mine_cross_unchecked(batch: &CmBatch, dmat: &DistanceMatrix, anchor: usize) -> (usize, usize) {
    let row = dmat.row(anchor);
    let block = batch.block_of(anchor);
    let other = batch.modality_at(anchor).opposite();
    let n = batch.len();
    let cross = |j: &usize| batch.modality_at(*j) == other;
    let pos = select(
        row,
        (0..n).filter(cross).filter(|&j| batch.block_of(j) == block),
        true,
    );
    let neg = select(
        row,
        (0..n).filter(cross).filter(|&j| batch.block_of(j) != block),
        false,
    );
    (pos.expect("positive exists"), neg.expect("negative exists"))
}

fn pentaplet(batch: &CmBatch, dmat: &DistanceMatrix, anchor: usize) -> HardestPentaplet {
    let (gp, gn) = mine_global_unchecked(batch, dmat, anchor);
    let (cp, cn) = mine_cross_unchecked(batch, dmat, anchor);
    let row = dmat.row(anchor);
    HardestPentaplet {
        anchor,
        global_pos: gp,
        global_neg: gn,
        cross_pos: cp,
        cross_neg: cn,
        distances: [row[gp], row[gn], row[cp], row[cn]],
    }
}

/// One pentaplet per batch position, in anchor order.
pub fn mine_batch(batch: &CmBatch, dmat: &DistanceMatrix) -> Result<Vec<HardestPentaplet>> {
    mine_batch_with(batch, dmat, Execution::default())
}

pub fn mine_batch_with(
    batch: &CmBatch,
    dmat: &DistanceMatrix,
    exec: Execution,
) -> Result<Vec<HardestPentaplet>> {
    check(batch, dmat)?;
    Ok(exec.map(batch.len(), |a| pentaplet(batch, dmat, a)))
}

/// One row per anchor: `anchor,gp,gn,cp,cn,d_gp,d_gn,d_cp,d_cn`.
pub fn write_pentaplets_csv<W: std::io::Write>(
    w: W,
    pentaplets: &[HardestPentaplet],
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "anchor", "gp", "gn", "cp", "cn", "d_gp", "d_gn", "d_cp", "d_cn",
    ])?;
    for t in pentaplets {
        let idx = [
            t.anchor,
            t.global_pos,
            t.global_neg,
            t.cross_pos,
            t.cross_neg,
        ];
        let row: Vec<String> = idx
            .iter()
            .map(usize::to_string)
            .chain(t.distances.iter().map(f64::to_string))
            .collect();
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}
