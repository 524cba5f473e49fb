//! Cross-modality ranking evaluation.
//!
//! RGB records form the gallery and IR records the probes. For each trial
//! the gallery is redrawn: per identity and gallery camera, `shot_count`
//! RGB records picked uniformly. Every probe from the probe cameras is then
//! ranked against the gallery by ascending Euclidean distance, skipping
//! gallery cameras that share a position with the probe camera.
//! CMC and mAP are averaged over probes, then over trials.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingDataset, Modality};
use crate::distance::euclidean;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::seed::{derive_seed, rng_from_seed};

/// Longest CMC curve reported.
pub const MAX_CMC_RANK: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    /// Gallery cameras 1, 2, 4, 5; probe cameras 3, 6.
    All,
    /// Gallery cameras 1, 2; probe camera 3.
    Indoor,
}

impl SearchMode {
    pub fn gallery_cameras(self) -> &'static [u8] {
        match self {
            SearchMode::All => &[1, 2, 4, 5],
            SearchMode::Indoor => &[1, 2],
        }
    }

    pub fn probe_cameras(self) -> &'static [u8] {
        match self {
            SearchMode::All => &[3, 6],
            SearchMode::Indoor => &[3],
        }
    }
}

impl fmt::Display for SearchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SearchMode::All => "all",
            SearchMode::Indoor => "indoor",
        })
    }
}

impl FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(SearchMode::All),
            "indoor" => Ok(SearchMode::Indoor),
            other => Err(Error::Usage(format!("unknown mode {other:?} (all|indoor)"))),
        }
    }
}

/// Gallery images per identity per camera: single = 1, multi = 10.
pub fn parse_shot(s: &str) -> Result<usize> {
    match s.trim() {
        "single" => Ok(1),
        "multi" => Ok(10),
        other => other
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Usage(format!("unknown shot {other:?} (single|multi|N)"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub mode: SearchMode,
    pub shot_count: usize,
    pub trials: usize,
    pub seed: u64,
    /// `(probe camera, gallery camera)` pairs never compared.
    pub exclusions: Vec<(u8, u8)>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            mode: SearchMode::All,
            shot_count: 1,
            trials: 10,
            seed: 0,
            exclusions: vec![(3, 2)],
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Usage("trials must be >= 1".into()));
        }
        if self.shot_count == 0 {
            return Err(Error::Usage("shot count must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    /// Dataset index of the probe.
    pub probe: usize,
    /// Dataset indices of the eligible gallery items, nearest first.
    pub order: Vec<usize>,
    /// `relevant[r]` is true iff `order[r]` shares the probe's identity.
    pub relevant: Vec<bool>,
}

impl RankingResult {
    pub fn first_hit(&self) -> Option<usize> {
        self.relevant.iter().position(|&r| r)
    }
}

/// Draws the gallery and collects the probes, both as ascending dataset indices.
pub fn build_gallery_probe<R: Rng + ?Sized>(
    dataset: &EmbeddingDataset,
    protocol: &ProtocolConfig,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    protocol.validate()?;
    let gallery_cams = protocol.mode.gallery_cameras();
    let probe_cams = protocol.mode.probe_cameras();
    let mut groups: BTreeMap<(u32, u8), Vec<usize>> = BTreeMap::new();
    let mut probe = Vec::new();
    for (i, r) in dataset.records().iter().enumerate() {
        match r.modality {
            Modality::Rgb if gallery_cams.contains(&r.camera) => {
                groups.entry((r.identity, r.camera)).or_default().push(i)
            }
            Modality::Ir if probe_cams.contains(&r.camera) => probe.push(i),
            _ => {}
        }
    }
    let mut gallery = Vec::new();
    for pool in groups.values() {
        let take = protocol.shot_count.min(pool.len());
        gallery.extend(
            index::sample(rng, pool.len(), take)
                .into_iter()
                .map(|j| pool[j]),
        );
    }
    gallery.sort_unstable();
    if gallery.is_empty() {
        return Err(Error::Protocol("gallery is empty".into()));
    }
    if probe.is_empty() {
        return Err(Error::Protocol("probe set is empty".into()));
    }
    Ok((gallery, probe))
}

/// Ranks `gallery` for one probe. `distances[g]` is the distance to `gallery[g]`.
/// Ties keep gallery order.
pub fn rank_probe(
    dataset: &EmbeddingDataset,
    probe: usize,
    gallery: &[usize],
    distances: &[f64],
    exclusions: &[(u8, u8)],
) -> Result<RankingResult> {
    if distances.len() != gallery.len() {
        return Err(Error::Input(
            "one distance per gallery item required".into(),
        ));
    }
    let p = dataset.record(probe);
    let mut eligible: Vec<usize> = (0..gallery.len())
        .filter(|&g| !exclusions.contains(&(p.camera, dataset.record(gallery[g]).camera)))
        .collect();
    if eligible.is_empty() {
        return Err(Error::Protocol(format!(
            "every gallery item is excluded for probe {probe}"
        )));
    }
    // stable sort: equal distances stay in gallery order
    eligible.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]));
    let order: Vec<usize> = eligible.iter().map(|&g| gallery[g]).collect();
    let relevant = order
        .iter()
        .map(|&i| dataset.record(i).identity == p.identity)
        .collect();
    Ok(RankingResult {
        probe,
        order,
        relevant,
    })
}

/// Mean over relevant positions `k` of precision at `k`; `None` without relevant items.
pub fn average_precision(result: &RankingResult) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in result.relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub cmc: Vec<f64>,
    pub rank1: f64,
    pub rank10: f64,
    pub rank20: f64,
    pub map: f64,
    pub gallery_size: usize,
    pub probes_evaluated: usize,
    pub probes_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: SearchMode,
    pub shot_count: usize,
    pub trials: usize,
    pub seed: u64,
    pub cmc: Vec<f64>,
    pub rank1: f64,
    pub rank10: f64,
    pub rank20: f64,
    pub map: f64,
    /// Probes without any relevant eligible gallery item, summed over trials.
    pub skipped_probes: usize,
    pub per_trial: Vec<TrialReport>,
}

fn rank_at(cmc: &[f64], k: usize) -> f64 {
    cmc[k.min(cmc.len()) - 1]
}

pub fn evaluate(dataset: &EmbeddingDataset, protocol: &ProtocolConfig) -> Result<EvalReport> {
    evaluate_with(dataset, protocol, Execution::default())
}

pub fn evaluate_with(
    dataset: &EmbeddingDataset,
    protocol: &ProtocolConfig,
    exec: Execution,
) -> Result<EvalReport> {
    protocol.validate()?;
    let mut per_trial = Vec::with_capacity(protocol.trials);
    for trial in 0..protocol.trials {
        let mut rng = rng_from_seed(derive_seed(protocol.seed, &format!("trial-{trial}")));
        let (gallery, probes) = build_gallery_probe(dataset, protocol, &mut rng)?;
        per_trial.push(evaluate_trial(
            dataset, protocol, trial, &gallery, &probes, exec,
        )?);
    }
    let r = per_trial[0].cmc.len();
    let n = per_trial.len() as f64;
    let mut cmc = vec![0.0; r];
    for t in &per_trial {
        for (c, v) in cmc.iter_mut().zip(&t.cmc) {
            *c += v;
        }
    }
    cmc.iter_mut().for_each(|c| *c /= n);
    let map = per_trial.iter().map(|t| t.map).sum::<f64>() / n;
    Ok(EvalReport {
        mode: protocol.mode,
        shot_count: protocol.shot_count,
        trials: protocol.trials,
        seed: protocol.seed,
        rank1: cmc[0],
        rank10: rank_at(&cmc, 10),
        rank20: rank_at(&cmc, 20),
        cmc,
        map,
        skipped_probes: per_trial.iter().map(|t| t.probes_skipped).sum(),
        per_trial,
    })
}

fn evaluate_trial(
    dataset: &EmbeddingDataset,
    protocol: &ProtocolConfig,
    trial: usize,
    gallery: &[usize],
    probes: &[usize],
    exec: Execution,
) -> Result<TrialReport> {
    let r = MAX_CMC_RANK.min(gallery.len());
    let results = exec.map(probes.len(), |pi| {
        let p = &dataset.record(probes[pi]).vector;
        let dists: Vec<f64> = gallery
            .iter()
            .map(|&g| euclidean(p, &dataset.record(g).vector))
            .collect();
        rank_probe(dataset, probes[pi], gallery, &dists, &protocol.exclusions)
    });
    let mut hits = vec![0usize; r];
    let mut ap_sum = 0.0;
    let (mut evaluated, mut skipped) = (0usize, 0usize);
    for res in results {
        let res = res?;
        let Some(ap) = average_precision(&res) else {
            skipped += 1;
            continue;
        };
        evaluated += 1;
        ap_sum += ap;
        let first = res.first_hit().expect("relevant item exists");
        for h in hits.iter_mut().skip(first) {
            *h += 1;
        }
    }
    if evaluated == 0 {
        return Err(Error::Protocol(format!(
            "trial {trial}: no probe has a relevant gallery item"
        )));
    }
    let cmc: Vec<f64> = hits.iter().map(|&h| h as f64 / evaluated as f64).collect();
    Ok(TrialReport {
        trial,
        rank1: cmc[0],
        rank10: rank_at(&cmc, 10),
        rank20: rank_at(&cmc, 20),
        cmc,
        map: ap_sum / evaluated as f64,
        gallery_size: gallery.len(),
        probes_evaluated: evaluated,
        probes_skipped: skipped,
    })
}

/// `rank,rate` rows for plotting.
pub fn write_cmc_csv<W: std::io::Write>(w: W, cmc: &[f64]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["rank", "rate"])?;
    for (k, v) in cmc.iter().enumerate() {
        out.write_record(&[(k + 1).to_string(), v.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EmbeddingRecord;

    fn rec(id: u32, m: Modality, cam: u8, v: f64) -> EmbeddingRecord {
        EmbeddingRecord::new(id, m, cam, vec![v])
    }

    #[test]
    fn ap_by_hand() {
        let r = |relevant: Vec<bool>| RankingResult {
            probe: 0,
            order: (0..relevant.len()).collect(),
            relevant,
        };
        assert_eq!(average_precision(&r(vec![true, false, false])), Some(1.0));
        assert_eq!(average_precision(&r(vec![false, true, false])), Some(0.5));
        let ap = average_precision(&r(vec![true, false, true])).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&r(vec![false, false])), None);
    }

    #[test]
    fn rank_sorts_and_excludes() {
        let ds = EmbeddingDataset::new(
            1,
            vec![
                rec(0, Modality::Ir, 3, 0.0),
                rec(0, Modality::Rgb, 1, 2.0),
                rec(1, Modality::Rgb, 4, 1.0),
                rec(2, Modality::Rgb, 5, 3.0),
                rec(0, Modality::Rgb, 2, 0.0),
            ],
        )
        .unwrap();
        let res = rank_probe(&ds, 0, &[1, 2, 3], &[2.0, 1.0, 3.0], &[(3, 2)]).unwrap();
        assert_eq!(res.order, vec![2, 1, 3]);
        assert_eq!(res.relevant, vec![false, true, false]);
        let res = rank_probe(&ds, 0, &[1, 4], &[2.0, 0.0], &[(3, 2)]).unwrap();
        assert_eq!(res.order, vec![1]);
        let res = rank_probe(&ds, 0, &[1], &[2.0], &[]).unwrap();
        assert_eq!(res.order.len(), 1);
        assert!(matches!(
            rank_probe(&ds, 0, &[4], &[0.0], &[(3, 2)]),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn ties_keep_gallery_order() {
        let ds = EmbeddingDataset::new(
            1,
            vec![
                rec(0, Modality::Ir, 3, 0.0),
                rec(1, Modality::Rgb, 1, 1.0),
                rec(0, Modality::Rgb, 4, -1.0),
            ],
        )
        .unwrap();
        let res = rank_probe(&ds, 0, &[1, 2], &[1.0, 1.0], &[]).unwrap();
        assert_eq!(res.order, vec![1, 2]);
    }

    #[test]
    fn single_shot_forced_gallery() {
        let mut records = Vec::new();
        for id in 0..3 {
            for cam in [1u8, 2, 4, 5] {
                records.push(rec(id, Modality::Rgb, cam, id as f64));
            }
            records.push(rec(id, Modality::Ir, 3, id as f64));
        }
        // identity 9 appears only on camera 3
        records.push(rec(9, Modality::Ir, 3, 9.0));
        let ds = EmbeddingDataset::new(1, records).unwrap();
        let (g, p) =
            build_gallery_probe(&ds, &ProtocolConfig::default(), &mut rng_from_seed(0)).unwrap();
        assert_eq!(g.len(), 12);
        assert!(g.iter().all(|&i| ds.record(i).identity != 9));
        assert!(p.iter().any(|&i| ds.record(i).identity == 9));
        assert_eq!(p.len(), 4);
    }

    #[test]
    fn multi_shot_takes_ten() {
        let mut records = Vec::new();
        for id in 0..2 {
            for j in 0..15 {
                records.push(rec(id, Modality::Rgb, 1, j as f64));
            }
            records.push(rec(id, Modality::Ir, 3, 0.0));
        }
        let ds = EmbeddingDataset::new(1, records).unwrap();
        let proto = ProtocolConfig {
            mode: SearchMode::Indoor,
            shot_count: parse_shot("multi").unwrap(),
            ..Default::default()
        };
        let (g, _) = build_gallery_probe(&ds, &proto, &mut rng_from_seed(3)).unwrap();
        assert_eq!(g.len(), 20);
        for id in 0..2 {
            assert_eq!(
                g.iter().filter(|&&i| ds.record(i).identity == id).count(),
                10
            );
        }
    }

    #[test]
    fn empty_sets_are_protocol_errors() {
        let ds = EmbeddingDataset::new(1, vec![rec(0, Modality::Rgb, 1, 0.0)]).unwrap();
        let err = build_gallery_probe(&ds, &ProtocolConfig::default(), &mut rng_from_seed(0));
        assert!(matches!(err, Err(Error::Protocol(_))));
        let ds = EmbeddingDataset::new(1, vec![rec(0, Modality::Ir, 3, 0.0)]).unwrap();
        let err = build_gallery_probe(&ds, &ProtocolConfig::default(), &mut rng_from_seed(0));
        assert!(matches!(err, Err(Error::Protocol(_))));
    }

    #[test]
    fn perfect_retrieval() {
        let mut records = Vec::new();
        for id in 0..4u32 {
            let v = 100.0 * id as f64;
            records.push(rec(id, Modality::Rgb, 1, v));
            records.push(rec(id, Modality::Ir, 3, v));
        }
        for j in 0..5 {
            records.push(rec(50 + j, Modality::Rgb, 4, 1e4 + j as f64));
        }
        let ds = EmbeddingDataset::new(1, records).unwrap();
        let rep = evaluate(&ds, &ProtocolConfig::default()).unwrap();
        assert_eq!(rep.rank1, 1.0);
        assert_eq!(rep.map, 1.0);
        assert_eq!(rep.cmc.len(), 9);
    }

    #[test]
    fn parsing() {
        assert_eq!("all".parse::<SearchMode>().unwrap(), SearchMode::All);
        assert_eq!("indoor".parse::<SearchMode>().unwrap(), SearchMode::Indoor);
        assert!("outdoor".parse::<SearchMode>().is_err());
        assert_eq!(parse_shot("single").unwrap(), 1);
        assert_eq!(parse_shot("3").unwrap(), 3);
        assert!(parse_shot("0").is_err());
    }
}
