//! Central finite-difference checks of the analytic gradients.
//!
//! Instances are random but filtered to be "tie-free": every mined
//! argmax/argmin wins by a clear gap, every hinge sits away from its kink,
//! every mined distance is away from zero, and (for the model) every hidden
//! pre-activation is away from the ReLU kink. Only there is the loss
//! differentiable in the ordinary sense.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::distance::{pairwise_distances, squared_distance};
use crate::error::{Error, Result};
use crate::losses::{
    hard_cross_triplet_loss, hard_global_triplet_loss, hard_pentaplet_loss, hard_triplet_loss,
    hpi_loss, identity_loss, triplet_loss, LossConfig,
};
use crate::matrix::Matrix;
use crate::sampler::{CmBatch, CmBatchSpec};
use crate::seed::rng_from_seed;
use crate::trainer::{evaluate_batch, EmbeddingModel, LossKind, TrainedModel};

pub const STEP: f64 = 1e-5;
/// Minimum gap from any tie or kink for an instance to be used.
pub const CLEARANCE: f64 = 1e-3;
/// Magnitudes below this are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-3;
pub const LOSS_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GradTarget {
    Trip,
    Htrip,
    Hgt,
    Hct,
    Hp,
    Id,
    Hpi,
    /// HPI loss backpropagated through a 4-6-3 model and its classifier head.
    Model,
}

impl GradTarget {
    pub const ALL: [GradTarget; 8] = [
        GradTarget::Trip,
        GradTarget::Htrip,
        GradTarget::Hgt,
        GradTarget::Hct,
        GradTarget::Hp,
        GradTarget::Id,
        GradTarget::Hpi,
        GradTarget::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::Trip => "trip",
            GradTarget::Htrip => "htrip",
            GradTarget::Hgt => "hgt",
            GradTarget::Hct => "hct",
            GradTarget::Hp => "hp",
            GradTarget::Id => "id",
            GradTarget::Hpi => "hpi",
            GradTarget::Model => "model",
        }
    }

    pub fn tolerance(self) -> f64 {
        if self == GradTarget::Model {
            MODEL_TOLERANCE
        } else {
            LOSS_TOLERANCE
        }
    }
}

impl fmt::Display for GradTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradTarget::ALL
            .into_iter()
            .find(|t| t.name() == s.trim())
            .ok_or_else(|| Error::Usage(format!("unknown gradcheck target {s:?}")))
    }
}

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Largest relative error between `analytic` and central differences of `f`
/// around `x`.
pub fn check_against_fd<F>(x: &[f64], analytic: &[f64], mut f: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for k in 0..x.len() {
        probe[k] = x[k] + STEP;
        let up = f(&probe)?;
        probe[k] = x[k] - STEP;
        let down = f(&probe)?;
        probe[k] = x[k];
        worst = worst.max(relative_error(analytic[k], (up - down) / (2.0 * STEP)));
    }
    Ok(worst)
}

/// Smallest gap to a selection tie, hinge kink or zero distance over all anchors.
pub fn cm_batch_clearance(
    batch: &CmBatch,
    embeddings: &Matrix,
    config: &LossConfig,
) -> Result<f64> {
    let dmat = pairwise_distances(embeddings)?;
    let n = batch.len();
    let mut clear = f64::INFINITY;
    let gap = |mut ds: Vec<f64>, farthest: bool| -> (f64, f64) {
        ds.sort_by(f64::total_cmp);
        if farthest {
            ds.reverse();
        }
        let best = ds[0];
        let second = ds.get(1).map_or(f64::INFINITY, |s| (s - best).abs());
        (best, second)
    };
    for a in 0..n {
        let row = dmat.row(a);
        let same = |j: usize| batch.block_of(j) == batch.block_of(a);
        let cross = |j: usize| batch.modality_at(j) != batch.modality_at(a);
        let pick = |f: &dyn Fn(usize) -> bool| {
            (0..n).filter(|&j| f(j)).map(|j| row[j]).collect::<Vec<_>>()
        };
        let (gp, g1) = gap(pick(&|j| j != a && same(j)), true);
        let (gn, g2) = gap(pick(&|j| !same(j)), false);
        let (cp, g3) = gap(pick(&|j| same(j) && cross(j)), true);
        let (cn, g4) = gap(pick(&|j| !same(j) && cross(j)), false);
        let h1 = (config.margin + gp - gn).abs();
        let h2 = (config.cross_margin() + cp - cn).abs();
        for v in [g1, g2, g3, g4, gp, gn, cp, cn, h1, h2] {
            clear = clear.min(v);
        }
    }
    Ok(clear)
}

/// Same as [`cm_batch_clearance`] for the modality-blind hard triplet loss.
pub fn labelled_clearance(labels: &[u32], embeddings: &Matrix, margin: f64) -> Result<f64> {
    let dmat = pairwise_distances(embeddings)?;
    let n = labels.len();
    let mut clear = f64::INFINITY;
    for a in 0..n {
        let row = dmat.row(a);
        let mut pos: Vec<f64> = (0..n)
            .filter(|&j| j != a && labels[j] == labels[a])
            .map(|j| row[j])
            .collect();
        let mut neg: Vec<f64> = (0..n)
            .filter(|&j| labels[j] != labels[a])
            .map(|j| row[j])
            .collect();
        pos.sort_by(|x, y| y.total_cmp(x));
        neg.sort_by(f64::total_cmp);
        let dp = pos.first().copied().unwrap_or(0.0);
        if pos.len() > 1 {
            clear = clear.min(pos[0] - pos[1]);
        }
        if neg.len() > 1 {
            clear = clear.min(neg[1] - neg[0]);
        }
        if !pos.is_empty() {
            clear = clear.min(dp);
        }
        clear = clear.min(neg[0]).min((margin + dp - neg[0]).abs());
    }
    Ok(clear)
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| StandardNormal.sample(rng))
            .collect(),
    )
}

fn random_batch<R: Rng + ?Sized>(rng: &mut R) -> CmBatch {
    let p = rng.random_range(2..=3);
    let k = rng.random_range(1..=2);
    let spec = CmBatchSpec { p, k };
    CmBatch::from_layout(
        spec,
        (0..spec.batch_size()).collect(),
        (0..p as u32).collect(),
    )
    .expect("valid layout")
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub target: GradTarget,
    pub instances: usize,
    /// Random draws discarded for lacking clearance.
    pub rejected: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance
    }
}

const MAX_DRAWS: usize = 10_000;

/// Checks `instances` tie-free random instances of `target`.
pub fn gradcheck(target: GradTarget, seed: u64, instances: usize) -> Result<GradcheckReport> {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut rejected = 0;
    let cfg = LossConfig {
        margin: 1.0,
        cross_margin: None,
        identity_weight: 1.0,
    };
    while done < instances {
        if done + rejected >= MAX_DRAWS {
            return Err(Error::Numerical(format!(
                "could not draw {instances} tie-free instances for {target}"
            )));
        }
        let err = match target {
            GradTarget::Trip => check_triplet(&mut rng, cfg.margin)?,
            GradTarget::Htrip => check_hard_triplet(&mut rng, cfg.margin)?,
            GradTarget::Hgt | GradTarget::Hct | GradTarget::Hp => {
                check_cm_loss(&mut rng, target, &cfg)?
            }
            GradTarget::Id => Some(check_identity(&mut rng)?),
            GradTarget::Hpi => check_hpi(&mut rng, &cfg)?,
            GradTarget::Model => check_model(&mut rng, &cfg)?,
        };
        match err {
            Some(e) => {
                worst = worst.max(e);
                done += 1;
            }
            None => rejected += 1,
        }
    }
    Ok(GradcheckReport {
        target,
        instances,
        rejected,
        max_relative_error: worst,
        tolerance: target.tolerance(),
    })
}

fn check_triplet<R: Rng + ?Sized>(rng: &mut R, margin: f64) -> Result<Option<f64>> {
    let (n, d) = (4, 3);
    let x = gaussian_matrix(3 * n, d, rng);
    let triplets_of = |m: &Matrix| -> Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        (0..n)
            .map(|i| {
                (
                    m.row(3 * i).to_vec(),
                    m.row(3 * i + 1).to_vec(),
                    m.row(3 * i + 2).to_vec(),
                )
            })
            .collect()
    };
    for (a, p, q) in triplets_of(&x) {
        if (squared_distance(&a, &p) - squared_distance(&a, &q) + margin).abs() < CLEARANCE {
            return Ok(None);
        }
    }
    let out = triplet_loss(&triplets_of(&x), margin)?;
    check_against_fd(x.as_slice(), out.grad.as_slice(), |v| {
        Ok(triplet_loss(
            &triplets_of(&Matrix::from_vec(3 * n, d, v.to_vec())),
            margin,
        )?
        .value)
    })
    .map(Some)
}

fn check_hard_triplet<R: Rng + ?Sized>(rng: &mut R, margin: f64) -> Result<Option<f64>> {
    let labels: Vec<u32> = vec![0, 0, 0, 1, 1, 2, 2, 2];
    let x = gaussian_matrix(labels.len(), 3, rng);
    if labelled_clearance(&labels, &x, margin)? < CLEARANCE {
        return Ok(None);
    }
    let out = hard_triplet_loss(&labels, &x, margin)?;
    check_against_fd(x.as_slice(), out.grad.as_slice(), |v| {
        Ok(hard_triplet_loss(
            &labels,
            &Matrix::from_vec(x.rows(), x.cols(), v.to_vec()),
            margin,
        )?
        .value)
    })
    .map(Some)
}

fn check_cm_loss<R: Rng + ?Sized>(
    rng: &mut R,
    target: GradTarget,
    cfg: &LossConfig,
) -> Result<Option<f64>> {
    let batch = random_batch(rng);
    let x = gaussian_matrix(batch.len(), 3, rng);
    if cm_batch_clearance(&batch, &x, cfg)? < CLEARANCE {
        return Ok(None);
    }
    let eval = |m: &Matrix| -> Result<(f64, Matrix)> {
        Ok(match target {
            GradTarget::Hgt => {
                let o = hard_global_triplet_loss(&batch, m, cfg.margin)?;
                (o.value, o.grad)
            }
            GradTarget::Hct => {
                let o = hard_cross_triplet_loss(&batch, m, cfg.margin)?;
                (o.value, o.grad)
            }
            _ => {
                let o = hard_pentaplet_loss(&batch, m, cfg)?;
                (o.total.value, o.total.grad)
            }
        })
    };
    let (_, grad) = eval(&x)?;
    check_against_fd(x.as_slice(), grad.as_slice(), |v| {
        Ok(eval(&Matrix::from_vec(x.rows(), x.cols(), v.to_vec()))?.0)
    })
    .map(Some)
}

fn check_identity<R: Rng + ?Sized>(rng: &mut R) -> Result<f64> {
    let (n, t) = (6, 4);
    let mut logits = gaussian_matrix(n, t, rng);
    logits.scale(2.0);
    let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..t)).collect();
    let out = identity_loss(&logits, &classes)?;
    check_against_fd(logits.as_slice(), out.grad_logits.as_slice(), |v| {
        Ok(identity_loss(&Matrix::from_vec(n, t, v.to_vec()), &classes)?.value)
    })
}

fn check_hpi<R: Rng + ?Sized>(rng: &mut R, cfg: &LossConfig) -> Result<Option<f64>> {
    let batch = random_batch(rng);
    let emb = gaussian_matrix(batch.len(), 3, rng);
    if cm_batch_clearance(&batch, &emb, cfg)? < CLEARANCE {
        return Ok(None);
    }
    let t = batch.spec.p;
    let logits = gaussian_matrix(batch.len(), t, rng);
    let classes: Vec<usize> = (0..batch.len()).map(|i| batch.block_of(i)).collect();
    let out = hpi_loss(&batch, &emb, &logits, &classes, cfg)?;
    let e1 = check_against_fd(emb.as_slice(), out.grad_embeddings().as_slice(), |v| {
        let m = Matrix::from_vec(emb.rows(), emb.cols(), v.to_vec());
        Ok(hpi_loss(&batch, &m, &logits, &classes, cfg)?.value)
    })?;
    let e2 = check_against_fd(logits.as_slice(), out.grad_logits().as_slice(), |v| {
        let m = Matrix::from_vec(logits.rows(), logits.cols(), v.to_vec());
        Ok(hpi_loss(&batch, &emb, &m, &classes, cfg)?.value)
    })?;
    Ok(Some(e1.max(e2)))
}

/// Flattens every trainable tensor of `net` (model layers, then head).
fn flat_params(net: &TrainedModel) -> Vec<f64> {
    let mut out = Vec::new();
    for l in &net.model.layers {
        out.extend_from_slice(l.weights.as_slice());
        out.extend_from_slice(&l.bias);
    }
    out.extend_from_slice(net.head.weights.as_slice());
    out.extend_from_slice(&net.head.biases);
    out
}

fn set_flat_params(net: &mut TrainedModel, flat: &[f64]) {
    let mut it = flat.iter().copied();
    for l in &mut net.model.layers {
        l.weights
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = it.next().unwrap());
        l.bias.iter_mut().for_each(|v| *v = it.next().unwrap());
    }
    net.head
        .weights
        .as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = it.next().unwrap());
    net.head
        .biases
        .iter_mut()
        .for_each(|v| *v = it.next().unwrap());
}

fn check_model<R: Rng + ?Sized>(rng: &mut R, cfg: &LossConfig) -> Result<Option<f64>> {
    let batch = random_batch(rng);
    let model = EmbeddingModel::init(4, Some(6), 3, rng)?;
    let mut net = TrainedModel::new(model, (0..batch.spec.p as u32).collect(), rng)?;
    for l in &mut net.model.layers {
        l.bias
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-0.3..0.3));
    }
    let inputs = gaussian_matrix(batch.len(), 4, rng);
    let emb = net.model.forward(&inputs)?;
    if net.model.min_abs_pre_activation(&inputs)? < CLEARANCE
        || cm_batch_clearance(&batch, &emb, cfg)? < CLEARANCE
    {
        return Ok(None);
    }
    let classes: Vec<usize> = (0..batch.len()).map(|i| batch.block_of(i)).collect();
    let eval = evaluate_batch(&net, &inputs, &batch, &classes, LossKind::Hpi, cfg)?;
    let mut analytic = Vec::new();
    for (w, b) in &eval.model_grads.layers {
        analytic.extend_from_slice(w.as_slice());
        analytic.extend_from_slice(b);
    }
    analytic.extend_from_slice(eval.head_grads.0.as_slice());
    analytic.extend_from_slice(&eval.head_grads.1);
    let x = flat_params(&net);
    let mut probe = net.clone();
    check_against_fd(&x, &analytic, |v| {
        set_flat_params(&mut probe, v);
        Ok(
            evaluate_batch(&probe, &inputs, &batch, &classes, LossKind::Hpi, cfg)?
                .row
                .loss,
        )
    })
    .map(Some)
}
