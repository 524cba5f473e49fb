//! End-to-end runs: synthetic data -> training -> export -> evaluation,
//! and the same under several objectives for comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_cmc_csv, EvalReport};
use crate::io::save_dataset;
use crate::sampler::CmBatchSampler;
use crate::trainer::{
    export_embeddings, generate_synthetic, init_model, train, write_history, HistoryRow, LossKind,
    TrainConfig, TrainedModel,
};

/// A failure tagged with the stage that produced it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub source: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

trait Stage<T> {
    fn stage(self, name: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, name: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError {
            stage: name,
            source,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

pub fn digest_file(path: &Path) -> Result<FileDigest> {
    let bytes = fs::read(path)?;
    let hash = Sha256::digest(&bytes);
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: hash.iter().map(|b| format!("{b:02x}")).collect(),
    })
}

/// Provenance record written next to a run's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: String, seeds: BTreeMap<String, u64>) -> Self {
        Self {
            tool: "xmodal".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
            duration_secs: 0.0,
        }
    }

    pub fn finish(
        mut self,
        inputs: &[&Path],
        outputs: &[&Path],
        started: Instant,
        path: &Path,
    ) -> Result<()> {
        self.inputs = inputs
            .iter()
            .map(|p| digest_file(p))
            .collect::<Result<_>>()?;
        self.outputs = outputs
            .iter()
            .map(|p| digest_file(p))
            .collect::<Result<_>>()?;
        self.duration_secs = started.elapsed().as_secs_f64();
        write_json(path, &self)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn save_model(path: &Path, model: &TrainedModel) -> Result<()> {
    write_json(path, model)
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let model: TrainedModel = serde_json::from_slice(&fs::read(path)?)?;
    model.validate()?;
    Ok(model)
}

pub fn save_history(path: &Path, history: &[HistoryRow]) -> Result<()> {
    write_history(BufWriter::new(File::create(path)?), history)
}

pub fn save_cmc(path: &Path, cmc: &[f64]) -> Result<()> {
    write_cmc_csv(BufWriter::new(File::create(path)?), cmc)
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: EvalReport,
    pub history: Vec<HistoryRow>,
    pub model: TrainedModel,
    pub dataset_path: PathBuf,
    pub model_path: PathBuf,
    pub history_path: PathBuf,
    pub embeddings_path: PathBuf,
    pub report_path: PathBuf,
    pub cmc_path: PathBuf,
    pub manifest_path: PathBuf,
}

struct Trained {
    model: TrainedModel,
    history: Vec<HistoryRow>,
    report: EvalReport,
    dataset: crate::data::EmbeddingDataset,
    embeddings: crate::data::EmbeddingDataset,
}

fn run_stages(
    config: &PipelineConfig,
    train_cfg: &TrainConfig,
) -> std::result::Result<Trained, StageError> {
    let dataset = generate_synthetic(&config.synth).stage("synth")?;
    let (train_set, held_out) = dataset
        .split_holdout(config.holdout_fraction)
        .stage("split")?;
    log::info!(
        "split: {} train / {} held-out records",
        train_set.len(),
        held_out.len()
    );
    CmBatchSampler::new(&train_set, train_cfg.batch).stage("sample")?;
    let net = init_model(&train_set, train_cfg).stage("train")?;
    log::info!(
        "train: {} for {} iterations",
        train_cfg.objective,
        train_cfg.iterations
    );
    let outcome = train(&train_set, net, train_cfg).stage("train")?;
    let embeddings = export_embeddings(&outcome.model.model, &held_out).stage("export")?;
    let report = evaluate(&embeddings, &config.protocol).stage("eval")?;
    log::info!("eval: rank-1 {:.4}, mAP {:.4}", report.rank1, report.map);
    Ok(Trained {
        model: outcome.model,
        history: outcome.history,
        report,
        dataset,
        embeddings,
    })
}

/// Runs synth -> split -> sample -> train -> export -> eval and writes every
/// artifact plus `manifest.json` into `out_dir`.
pub fn run_pipeline(
    config: &PipelineConfig,
    out_dir: &Path,
) -> std::result::Result<PipelineOutcome, StageError> {
    let started = Instant::now();
    fs::create_dir_all(out_dir)
        .map_err(Error::from)
        .stage("io")?;
    let t = run_stages(config, &config.train)?;

    let dataset_path = out_dir.join("dataset.emb");
    let model_path = out_dir.join("model.json");
    let history_path = out_dir.join("history.csv");
    let embeddings_path = out_dir.join("embeddings.emb");
    let report_path = out_dir.join("report.json");
    let cmc_path = out_dir.join("cmc.csv");
    let manifest_path = out_dir.join("manifest.json");
    (|| -> Result<()> {
        save_dataset(&dataset_path, &t.dataset)?;
        save_model(&model_path, &t.model)?;
        save_history(&history_path, &t.history)?;
        save_dataset(&embeddings_path, &t.embeddings)?;
        write_json(&report_path, &t.report)?;
        save_cmc(&cmc_path, &t.report.cmc)?;
        RunManifest::new("pipeline", config.to_kv_string(), config.stage_seeds()).finish(
            &[],
            &[
                &dataset_path,
                &model_path,
                &history_path,
                &embeddings_path,
                &report_path,
                &cmc_path,
            ],
            started,
            &manifest_path,
        )
    })()
    .stage("write")?;
    Ok(PipelineOutcome {
        report: t.report,
        history: t.history,
        model: t.model,
        dataset_path,
        model_path,
        history_path,
        embeddings_path,
        report_path,
        cmc_path,
        manifest_path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub loss: LossKind,
    pub margin: f64,
    pub rank1: f64,
    pub map: f64,
    /// Hard pentaplet loss on the last training batch.
    pub final_hp: f64,
}

/// Trains one model per objective in `config.losses` (and per margin in
/// `config.margins`, if any) on the same data, initialisation, batch stream
/// and budget. Writes `comparison.csv`, one CMC table per run and
/// `manifest.json` into `out_dir`.
pub fn compare_losses(
    config: &PipelineConfig,
    out_dir: &Path,
) -> std::result::Result<Vec<ComparisonRow>, StageError> {
    let started = Instant::now();
    let mut losses: Vec<LossKind> = Vec::new();
    for &l in &config.losses {
        if !losses.contains(&l) {
            losses.push(l);
        }
    }
    if losses.len() < 2 {
        return Err(StageError {
            stage: "config",
            source: Error::Usage("loss comparison needs at least two distinct losses".into()),
        });
    }
    let sweep = !config.margins.is_empty();
    let margins = if sweep {
        config.margins.clone()
    } else {
        vec![config.train.loss.margin]
    };
    fs::create_dir_all(out_dir)
        .map_err(Error::from)
        .stage("io")?;
    let mut rows = Vec::new();
    let mut outputs = Vec::new();
    for &margin in &margins {
        for &loss in &losses {
            let mut train_cfg = TrainConfig {
                objective: loss,
                ..config.train.clone()
            };
            train_cfg.loss.margin = margin;
            let t = run_stages(config, &train_cfg)?;
            let name = if sweep {
                format!("cmc_{loss}_margin{margin}.csv")
            } else {
                format!("cmc_{loss}.csv")
            };
            let cmc_path = out_dir.join(name);
            save_cmc(&cmc_path, &t.report.cmc).stage("write")?;
            outputs.push(cmc_path);
            rows.push(ComparisonRow {
                loss,
                margin,
                rank1: t.report.rank1,
                map: t.report.map,
                final_hp: t.history.last().map_or(f64::NAN, |r| r.hp),
            });
        }
    }
    let table = out_dir.join("comparison.csv");
    (|| -> Result<()> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&table)?));
        w.write_record(["loss", "margin", "rank1", "map"])?;
        for r in &rows {
            w.write_record(&[
                r.loss.to_string(),
                r.margin.to_string(),
                r.rank1.to_string(),
                r.map.to_string(),
            ])?;
        }
        w.flush()?;
        drop(w);
        let mut outs: Vec<&Path> = vec![&table];
        outs.extend(outputs.iter().map(PathBuf::as_path));
        RunManifest::new(
            "compare-losses",
            config.to_kv_string(),
            config.stage_seeds(),
        )
        .finish(&[], &outs, started, &out_dir.join("manifest.json"))
    })()
    .stage("write")?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.train.iterations = 50;
        c.protocol.trials = 2;
        c
    }

    #[test]
    fn single_identity_batch_fails_in_sample_stage() {
        let mut c = quick();
        c.train.batch.p = 1;
        let dir = tempfile::tempdir().unwrap();
        let err = run_pipeline(&c, dir.path()).unwrap_err();
        assert_eq!(err.stage, "sample");
    }

    #[test]
    fn report_schema() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_pipeline(&quick(), dir.path()).unwrap();
        let v: serde_json::Value =
            serde_json::from_slice(&fs::read(&out.report_path).unwrap()).unwrap();
        let r1 = v["rank1"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&r1));
        assert!(v["cmc"].is_array());
        assert!(v["per_trial"].as_array().unwrap().len() == 2);
        assert!(out.manifest_path.exists());
    }

    #[test]
    fn comparison_needs_two_losses() {
        let mut c = quick();
        c.losses = vec![LossKind::Hpi];
        let dir = tempfile::tempdir().unwrap();
        let err = compare_losses(&c, dir.path()).unwrap_err();
        assert!(matches!(err.source, Error::Usage(_)));
    }

    #[test]
    fn comparison_rows() {
        let mut c = quick();
        c.losses = vec![LossKind::Hp, LossKind::Hpi];
        let dir = tempfile::tempdir().unwrap();
        let rows = compare_losses(&c, dir.path()).unwrap();
        assert_eq!(rows.len(), 2);
        for r in rows {
            assert!((0.0..=1.0).contains(&r.rank1) && (0.0..=1.0).contains(&r.map));
        }
        assert!(dir.path().join("cmc_hp.csv").exists());
    }

    #[test]
    fn margin_sweep_repeats_each_loss() {
        let mut c = quick();
        c.losses = vec![LossKind::Hp, LossKind::Hpi, LossKind::Hp];
        c.margins = vec![0.3, 0.6];
        let dir = tempfile::tempdir().unwrap();
        let rows = compare_losses(&c, dir.path()).unwrap();
        let got: Vec<(LossKind, f64)> = rows.iter().map(|r| (r.loss, r.margin)).collect();
        assert_eq!(
            got,
            vec![
                (LossKind::Hp, 0.3),
                (LossKind::Hpi, 0.3),
                (LossKind::Hp, 0.6),
                (LossKind::Hpi, 0.6)
            ]
        );
        assert!(dir.path().join("cmc_hpi_margin0.6.csv").exists());
        let table = fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
        assert_eq!(table.lines().count(), 5);
    }
}
