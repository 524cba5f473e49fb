use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::losses::{
    hard_pentaplet_loss, hard_triplet_loss, identity_loss, ClassifierHead, LossConfig,
};
use crate::matrix::Matrix;
use crate::sampler::{CmBatch, CmBatchSampler, CmBatchSpec};
use crate::seed::stage_rng;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::model::{EmbeddingModel, ModelGrads};

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Identity (softmax) loss only.
    Id,
    /// Batch-hard triplet loss, modality-blind.
    Ht,
    /// Hard triplet plus identity loss.
    Hti,
    /// Hard pentaplet loss.
    Hp,
    /// Hard pentaplet plus identity loss.
    Hpi,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Id,
        LossKind::Ht,
        LossKind::Hti,
        LossKind::Hp,
        LossKind::Hpi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Id => "id",
            LossKind::Ht => "ht",
            LossKind::Hti => "hti",
            LossKind::Hp => "hp",
            LossKind::Hpi => "hpi",
        }
    }

    fn uses_identity(self) -> bool {
        matches!(self, LossKind::Id | LossKind::Hti | LossKind::Hpi)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown loss {s:?} (expected id, ht, hti, hp or hpi)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch: CmBatchSpec,
    pub loss: LossConfig,
    pub objective: LossKind,
    pub adam: AdamConfig,
    pub iterations: usize,
    /// Width of the hidden layer; `None` trains a single affine map.
    pub hidden_dim: Option<usize>,
    pub output_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            batch: CmBatchSpec { p: 4, k: 2 },
            loss: LossConfig::default(),
            objective: LossKind::Hpi,
            adam: AdamConfig::default(),
            iterations: 2000,
            hidden_dim: Some(32),
            output_dim: 2,
            seed: 1,
        }
    }
}

impl TrainConfig {
    /// Batch shape, optimizer and budget of the reference CNN experiments.
    pub fn reference_scale() -> Self {
        Self {
            batch: CmBatchSpec { p: 8, k: 4 },
            adam: AdamConfig::default(),
            iterations: 10_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.adam.validate()?;
        if self.iterations == 0 {
            return Err(Error::Usage("iterations must be >= 1".into()));
        }
        if self.output_dim == 0 || self.hidden_dim == Some(0) {
            return Err(Error::Usage("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Embedding model with its classifier head and the class -> identity map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub model: EmbeddingModel,
    pub head: ClassifierHead,
    /// `classes[c]` is the identity label of class index `c`.
    pub classes: Vec<u32>,
}

impl TrainedModel {
    pub fn new<R: rand::Rng + ?Sized>(
        model: EmbeddingModel,
        classes: Vec<u32>,
        rng: &mut R,
    ) -> Result<Self> {
        let head = ClassifierHead::init(classes.len(), model.output_dim(), rng)?;
        Ok(Self {
            model,
            head,
            classes,
        })
    }

    pub fn class_of(&self, identity: u32) -> Result<usize> {
        self.classes
            .binary_search(&identity)
            .map_err(|_| Error::Input(format!("identity {identity} has no class")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.head.dim() != self.model.output_dim() || self.head.classes() != self.classes.len() {
            return Err(Error::Format("classifier head does not match model".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    /// Value of the training objective.
    pub loss: f64,
    /// Hard pentaplet loss on the batch, whatever the objective.
    pub hp: f64,
    /// Identity loss on the batch, whatever the objective.
    pub id: f64,
}

/// Objective value on one batch and the gradients of every trainable tensor.
#[derive(Debug, Clone)]
pub struct BatchEvaluation {
    pub row: HistoryRow,
    pub model_grads: ModelGrads,
    /// `(weights, biases)`; zero when the objective has no identity term.
    pub head_grads: (Matrix, Vec<f64>),
}

/// Forward and backward pass of `objective` on one cm-batch.
pub fn evaluate_batch(
    net: &TrainedModel,
    inputs: &Matrix,
    batch: &CmBatch,
    classes: &[usize],
    objective: LossKind,
    config: &LossConfig,
) -> Result<BatchEvaluation> {
    let (emb, cache) = net.model.forward_cached(inputs)?;
    let logits = net.head.forward(&emb);
    if !(emb.is_finite() && logits.is_finite()) {
        return Err(Error::Numerical("non-finite embeddings or logits".into()));
    }
    let hp = hard_pentaplet_loss(batch, &emb, config)?;
    let id = identity_loss(&logits, classes)?;
    let w = if objective == LossKind::Id {
        1.0
    } else {
        config.identity_weight
    };

    let (metric_value, mut grad_emb) = match objective {
        LossKind::Id => (0.0, Matrix::zeros(emb.rows(), emb.cols())),
        LossKind::Hp | LossKind::Hpi => (hp.total.value, hp.total.grad.clone()),
        LossKind::Ht | LossKind::Hti => {
            let ht = hard_triplet_loss(&batch.labels(), &emb, config.margin)?;
            (ht.value, ht.grad)
        }
    };
    let mut loss = metric_value;
    let head_grads = if objective.uses_identity() {
        loss += w * id.value;
        let mut g_logits = id.grad_logits.clone();
        g_logits.scale(w);
        let (g_emb, g_w, g_b) = net.head.backward(&emb, &g_logits);
        grad_emb.add_scaled(&g_emb, 1.0);
        (g_w, g_b)
    } else {
        (
            Matrix::zeros(net.head.classes(), net.head.dim()),
            vec![0.0; net.head.classes()],
        )
    };
    let model_grads = net.model.backward(&cache, &grad_emb);
    Ok(BatchEvaluation {
        row: HistoryRow {
            iteration: 0,
            loss,
            hp: hp.total.value,
            id: id.value,
        },
        model_grads,
        head_grads,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub history: Vec<HistoryRow>,
}

/// Builds a fresh model and head for `dataset` from `config.seed`.
pub fn init_model(dataset: &EmbeddingDataset, config: &TrainConfig) -> Result<TrainedModel> {
    let mut rng = stage_rng(config.seed, "init");
    let model = EmbeddingModel::init(
        dataset.dim(),
        config.hidden_dim,
        config.output_dim,
        &mut rng,
    )?;
    TrainedModel::new(model, dataset.identities(), &mut rng)
}

/// Runs `config.iterations` Adam steps on sampled cm-batches.
pub fn train(
    dataset: &EmbeddingDataset,
    net: TrainedModel,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.loss.validate()?;
    config.adam.validate()?;
    net.validate()?;
    if net.model.input_dim() != dataset.dim() {
        return Err(Error::Input(format!(
            "model input {} does not match data dimension {}",
            net.model.input_dim(),
            dataset.dim()
        )));
    }
    let mut net = net;
    let mut history = Vec::with_capacity(config.iterations);
    if config.iterations == 0 {
        return Ok(TrainOutcome {
            model: net,
            history,
        });
    }
    let sampler = CmBatchSampler::new(dataset, config.batch)?;
    let class_of: Vec<usize> = dataset
        .records()
        .iter()
        .map(|r| net.class_of(r.identity))
        .collect::<Result<_>>()?;
    let mut rng = stage_rng(config.seed, "sample");
    let mut model_state = AdamState::new();
    let mut head_state = AdamState::new();
    for it in 0..config.iterations {
        let batch = sampler.sample(&mut rng);
        let inputs = dataset.gather(&batch.indices);
        let classes: Vec<usize> = batch.indices.iter().map(|&i| class_of[i]).collect();
        let eval = evaluate_batch(
            &net,
            &inputs,
            &batch,
            &classes,
            config.objective,
            &config.loss,
        )
        .map_err(|e| at_iteration(e, it))?;
        let row = HistoryRow {
            iteration: it,
            ..eval.row
        };
        if !(row.loss.is_finite() && row.hp.is_finite() && row.id.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite loss at iteration {it}"
            )));
        }
        if it % 500 == 0 || it + 1 == config.iterations {
            log::debug!(
                "iteration {it}: loss {:.6}, hp {:.6}, id {:.6}",
                row.loss,
                row.hp,
                row.id
            );
        }
        history.push(row);
        let grads = eval.model_grads.into_flat();
        adam_step(
            &mut net.model.parameters_mut(),
            &grads,
            &mut model_state,
            &config.adam,
        )
        .map_err(|e| at_iteration(e, it))?;
        if config.objective.uses_identity() {
            let (gw, gb) = eval.head_grads;
            let head = &mut net.head;
            adam_step(
                &mut [head.weights.as_mut_slice(), head.biases.as_mut_slice()],
                &[gw.as_slice().to_vec(), gb],
                &mut head_state,
                &config.adam,
            )
            .map_err(|e| at_iteration(e, it))?;
        }
    }
    Ok(TrainOutcome {
        model: net,
        history,
    })
}

fn at_iteration(e: Error, it: usize) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("iteration {it}: {m}")),
        other => other,
    }
}

/// Runs every record through the model, keeping identity, modality and camera.
pub fn export_embeddings(
    model: &EmbeddingModel,
    dataset: &EmbeddingDataset,
) -> Result<EmbeddingDataset> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let out = model.forward(&dataset.gather(&all))?;
    if !out.is_finite() {
        return Err(Error::Numerical(
            "model produced non-finite embeddings".into(),
        ));
    }
    dataset.with_vectors(&out)
}

pub fn write_history<W: std::io::Write>(w: W, history: &[HistoryRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["iteration", "loss", "hp", "id"])?;
    for r in history {
        out.write_record(&[
            r.iteration.to_string(),
            r.loss.to_string(),
            r.hp.to_string(),
            r.id.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::synth::{generate_synthetic, SyntheticSpec};

    fn toy() -> (EmbeddingDataset, TrainConfig) {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let cfg = TrainConfig {
            iterations: 500,
            ..TrainConfig::default()
        };
        (ds, cfg)
    }

    #[test]
    fn zero_iterations_leave_model_unchanged() {
        let (ds, mut cfg) = toy();
        cfg.iterations = 0;
        let net = init_model(&ds, &cfg).unwrap();
        let out = train(&ds, net.clone(), &cfg).unwrap();
        assert_eq!(out.model, net);
        assert!(out.history.is_empty());
    }

    #[test]
    fn toy_run_reduces_loss_and_is_deterministic() {
        let (ds, cfg) = toy();
        let a = train(&ds, init_model(&ds, &cfg).unwrap(), &cfg).unwrap();
        let b = train(&ds, init_model(&ds, &cfg).unwrap(), &cfg).unwrap();
        assert_eq!(a.history, b.history);
        let first: f64 = a.history[..20].iter().map(|r| r.loss).sum();
        let last: f64 = a.history[a.history.len() - 20..]
            .iter()
            .map(|r| r.loss)
            .sum();
        assert!(last < first, "{last} !< {first}");
        assert!(a.history.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn export_preserves_metadata() {
        let (ds, _) = toy();
        let out = export_embeddings(&EmbeddingModel::identity(ds.dim()), &ds).unwrap();
        assert_eq!(out, ds);
        let bad = export_embeddings(&EmbeddingModel::identity(3), &ds);
        assert!(matches!(bad, Err(Error::Input(_))));
    }

    #[test]
    fn divergence_is_a_numerical_error() {
        let (ds, mut cfg) = toy();
        cfg.adam.learning_rate = 1e300;
        cfg.iterations = 50;
        let err = train(&ds, init_model(&ds, &cfg).unwrap(), &cfg).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }

    #[test]
    fn reference_scale_is_valid() {
        let c = TrainConfig::reference_scale();
        assert_eq!((c.batch.p, c.batch.k, c.iterations), (8, 4, 10_000));
        assert_eq!(c.adam.learning_rate, 3e-4);
        c.validate().unwrap();
    }

    #[test]
    fn loss_names_parse() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert!(matches!("center".parse::<LossKind>(), Err(Error::Usage(_))));
    }

    #[test]
    fn sampler_error_on_single_identity_batch() {
        let (ds, mut cfg) = toy();
        cfg.batch = CmBatchSpec { p: 1, k: 2 };
        let err = train(&ds, init_model(&ds, &cfg).unwrap(), &cfg).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }
}
