//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known; unknown or repeated keys are usage errors.
//!
//! | key | meaning |
//! |-----|---------|
//! | `seed` | root seed; stage seeds derive from it |
//! | `num_identities`, `samples_per_identity_per_modality`, `input_dim`, `identity_spread`, `modality_offset`, `noise_sigma` | synthetic data |
//! | `p`, `k` | cm-batch shape |
//! | `margin`, `cross_margin`, `identity_weight` | loss |
//! | `loss` | training objective: `id`, `ht`, `hti`, `hp`, `hpi` |
//! | `learning_rate`, `adam_beta1`, `adam_beta2`, `adam_eps`, `iterations` | optimizer |
//! | `hidden_dim` (0 = single affine map), `output_dim` | model |
//! | `holdout_fraction` | share of each identity/modality group kept for evaluation |
//! | `mode` (`all`/`indoor`), `shot` (`single`/`multi`/N), `trials`, `exclusions` (`3:2,6:5`) | evaluation |
//! | `losses` | comma-separated objectives for loss comparison |
//! | `margins` | comma-separated margins; loss comparison repeats once per margin |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::{parse_shot, ProtocolConfig, SearchMode};
use crate::seed::derive_seed;
use crate::trainer::{LossKind, SyntheticSpec, TrainConfig};

struct KvFile {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvFile {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("line {}: expected key = value", n + 1)))?;
            let key = k.trim().to_string();
            if entries
                .insert(key.clone(), (n + 1, v.trim().to_string()))
                .is_some()
            {
                return Err(Error::Usage(format!(
                    "line {}: duplicate key {key:?}",
                    n + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    fn take_with<T>(
        &mut self,
        key: &str,
        parse: impl FnOnce(&str) -> Result<T>,
    ) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => parse(&v)
                .map(Some)
                .map_err(|e| Error::Usage(format!("line {line}: {key} = {v:?}: {e}"))),
        }
    }

    fn take<T: FromStr>(&mut self, key: &str, into: &mut T) -> Result<()> {
        if let Some(v) = self.take_with(key, |s| {
            s.parse::<T>()
                .map_err(|_| Error::Usage("cannot parse value".into()))
        })? {
            *into = v;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Usage(format!("line {line}: unknown key {k:?}"))),
        }
    }
}

fn parse_exclusions(s: &str) -> Result<Vec<(u8, u8)>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|pair| {
            let (a, b) = pair
                .split_once(':')
                .ok_or_else(|| Error::Usage(format!("exclusion {pair:?} is not probe:gallery")))?;
            let cam = |c: &str| {
                c.trim()
                    .parse::<u8>()
                    .map_err(|_| Error::Usage(format!("bad camera {c:?}")))
            };
            Ok((cam(a)?, cam(b)?))
        })
        .collect()
}

fn parse_losses(s: &str) -> Result<Vec<LossKind>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(LossKind::from_str)
        .collect()
}

fn parse_margins(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| match p.parse::<f64>() {
            Ok(m) if m.is_finite() && m >= 0.0 => Ok(m),
            _ => Err(Error::Usage(format!("bad margin {p:?}"))),
        })
        .collect()
}

/// Everything one end-to-end run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synth: SyntheticSpec,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
    pub holdout_fraction: f64,
    pub losses: Vec<LossKind>,
    /// Margin sweep for loss comparison; empty means the training margin only.
    pub margins: Vec<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SyntheticSpec::default(),
            train: TrainConfig::default(),
            protocol: ProtocolConfig::default(),
            holdout_fraction: 0.5,
            losses: vec![LossKind::Id, LossKind::Hp, LossKind::Hpi],
            margins: Vec::new(),
        }
        .reseeded(0)
    }
}

impl PipelineConfig {
    /// Defaults overridden by the keys in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let mut c = Self::default();
        kv.take("seed", &mut c.seed)?;

        let s = &mut c.synth;
        kv.take("num_identities", &mut s.num_identities)?;
        kv.take(
            "samples_per_identity_per_modality",
            &mut s.samples_per_identity_per_modality,
        )?;
        kv.take("input_dim", &mut s.input_dim)?;
        kv.take("identity_spread", &mut s.identity_spread)?;
        kv.take("modality_offset", &mut s.modality_offset)?;
        kv.take("noise_sigma", &mut s.noise_sigma)?;

        let t = &mut c.train;
        kv.take("p", &mut t.batch.p)?;
        kv.take("k", &mut t.batch.k)?;
        kv.take("margin", &mut t.loss.margin)?;
        if let Some(m) = kv.take_with("cross_margin", |v| {
            v.parse::<f64>()
                .map_err(|_| Error::Usage("not a number".into()))
        })? {
            t.loss.cross_margin = Some(m);
        }
        kv.take("identity_weight", &mut t.loss.identity_weight)?;
        if let Some(l) = kv.take_with("loss", LossKind::from_str)? {
            t.objective = l;
        }
        kv.take("learning_rate", &mut t.adam.learning_rate)?;
        kv.take("adam_beta1", &mut t.adam.beta1)?;
        kv.take("adam_beta2", &mut t.adam.beta2)?;
        kv.take("adam_eps", &mut t.adam.eps)?;
        kv.take("iterations", &mut t.iterations)?;
        if let Some(h) = kv.take_with("hidden_dim", |v| {
            v.parse::<usize>()
                .map_err(|_| Error::Usage("not an integer".into()))
        })? {
            t.hidden_dim = (h > 0).then_some(h);
        }
        kv.take("output_dim", &mut t.output_dim)?;

        kv.take("holdout_fraction", &mut c.holdout_fraction)?;
        let p = &mut c.protocol;
        if let Some(m) = kv.take_with("mode", SearchMode::from_str)? {
            p.mode = m;
        }
        if let Some(n) = kv.take_with("shot", parse_shot)? {
            p.shot_count = n;
        }
        kv.take("trials", &mut p.trials)?;
        if let Some(e) = kv.take_with("exclusions", parse_exclusions)? {
            p.exclusions = e;
        }
        if let Some(l) = kv.take_with("losses", parse_losses)? {
            c.losses = l;
        }
        if let Some(m) = kv.take_with("margins", parse_margins)? {
            c.margins = m;
        }
        kv.finish()?;
        let seed = c.seed;
        Ok(c.reseeded(seed))
    }

    /// Sets the root seed and re-derives every stage seed from it.
    pub fn reseeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = derive_seed(seed, "synth");
        self.train.seed = derive_seed(seed, "train");
        self.protocol.seed = derive_seed(seed, "eval");
        self
    }

    /// Stage label -> derived seed.
    pub fn stage_seeds(&self) -> BTreeMap<String, u64> {
        [
            ("root", self.seed),
            ("synth", self.synth.seed),
            ("train", self.train.seed),
            ("eval", self.protocol.seed),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Canonical `key = value` form; parsing it yields an equal config.
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        let s = &self.synth;
        let t = &self.train;
        let p = &self.protocol;
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("num_identities", s.num_identities.to_string());
        put(
            "samples_per_identity_per_modality",
            s.samples_per_identity_per_modality.to_string(),
        );
        put("input_dim", s.input_dim.to_string());
        put("identity_spread", s.identity_spread.to_string());
        put("modality_offset", s.modality_offset.to_string());
        put("noise_sigma", s.noise_sigma.to_string());
        put("p", t.batch.p.to_string());
        put("k", t.batch.k.to_string());
        put("margin", t.loss.margin.to_string());
        if let Some(m) = t.loss.cross_margin {
            put("cross_margin", m.to_string());
        }
        put("identity_weight", t.loss.identity_weight.to_string());
        put("loss", t.objective.to_string());
        put("learning_rate", t.adam.learning_rate.to_string());
        put("adam_beta1", t.adam.beta1.to_string());
        put("adam_beta2", t.adam.beta2.to_string());
        put("adam_eps", t.adam.eps.to_string());
        put("iterations", t.iterations.to_string());
        put("hidden_dim", t.hidden_dim.unwrap_or(0).to_string());
        put("output_dim", t.output_dim.to_string());
        put("holdout_fraction", self.holdout_fraction.to_string());
        put("mode", p.mode.to_string());
        put("shot", p.shot_count.to_string());
        put("trials", p.trials.to_string());
        put(
            "exclusions",
            p.exclusions
                .iter()
                .map(|(a, b)| format!("{a}:{b}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        put(
            "losses",
            self.losses
                .iter()
                .map(|l| l.name())
                .collect::<Vec<_>>()
                .join(","),
        );
        if !self.margins.is_empty() {
            put(
                "margins",
                self.margins
                    .iter()
                    .map(f64::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = PipelineConfig::parse(
            "# toy\nseed = 5\np = 3\nloss = hp\nhidden_dim = 0\nmode = indoor\nshot = multi\n",
        )
        .unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.train.batch.p, 3);
        assert_eq!(c.train.objective, LossKind::Hp);
        assert_eq!(c.train.hidden_dim, None);
        assert_eq!(c.protocol.mode, SearchMode::Indoor);
        assert_eq!(c.protocol.shot_count, 10);
        assert_eq!(c.synth.seed, derive_seed(5, "synth"));
    }

    #[test]
    fn kv_round_trip() {
        let c = PipelineConfig::parse("seed = 9\ncross_margin = 0.6\nexclusions = 3:2,6:5\nlosses = id,hpi\nmargins = 0.3, 0.6\n").unwrap();
        assert_eq!(c.margins, vec![0.3, 0.6]);
        assert_eq!(PipelineConfig::parse(&c.to_kv_string()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(matches!(
            PipelineConfig::parse("colour = red"),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            PipelineConfig::parse("p = 2\np = 3"),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            PipelineConfig::parse("p = two"),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            PipelineConfig::parse("losses = id,center"),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            PipelineConfig::parse("no equals sign"),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            PipelineConfig::parse("margins = 0.3,-1"),
            Err(Error::Usage(_))
        ));
    }
}
