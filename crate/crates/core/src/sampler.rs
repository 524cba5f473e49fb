//! Cross-modality batch construction.
//!
//! A cm-batch holds `P` identities, each contributing `K` RGB and `K` IR
//! samples. The layout is fixed: `P` contiguous blocks of `2K` positions,
//! each block `[K RGB | K IR]`, so modality and identity of a batch position
//! are pure index arithmetic.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingDataset, Modality};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CmBatchSpec {
    /// Identities per batch.
    pub p: usize,
    /// Samples per modality per identity.
    pub k: usize,
}

impl CmBatchSpec {
    pub fn new(p: usize, k: usize) -> Result<Self> {
        let spec = Self { p, k };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(Error::Input(format!(
                "P = {} but a cm-batch needs at least 2 identities",
                self.p
            )));
        }
        if self.k < 1 {
            return Err(Error::Input("K must be at least 1".into()));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        2 * self.p * self.k
    }

    pub fn block_len(&self) -> usize {
        2 * self.k
    }
}

/// Dataset indices in cm-batch layout plus the identity of each block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CmBatch {
    pub spec: CmBatchSpec,
    pub indices: Vec<usize>,
    pub identities: Vec<u32>,
}

impl CmBatch {
    /// Wraps a layout without consulting a dataset. Block identities must be distinct.
    pub fn from_layout(
        spec: CmBatchSpec,
        indices: Vec<usize>,
        identities: Vec<u32>,
    ) -> Result<Self> {
        spec.validate()?;
        if indices.len() != spec.batch_size() || identities.len() != spec.p {
            return Err(Error::Input(format!(
                "layout has {} indices / {} identities, expected {} / {}",
                indices.len(),
                identities.len(),
                spec.batch_size(),
                spec.p
            )));
        }
        let mut ids = identities.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != identities.len() {
            return Err(Error::Input("block identities must be distinct".into()));
        }
        Ok(Self {
            spec,
            indices,
            identities,
        })
    }

    /// Treats the records of `dataset`, in order, as one cm-batch. `K` is
    /// the length of the leading RGB run; the layout is then verified.
    pub fn from_ordered_dataset(dataset: &EmbeddingDataset) -> Result<Self> {
        let records = dataset.records();
        let k = records
            .iter()
            .take_while(|r| r.modality == Modality::Rgb)
            .count();
        if k == 0 || !records.len().is_multiple_of(2 * k) {
            return Err(Error::Input(format!(
                "{} records do not form [K RGB | K IR] blocks",
                records.len()
            )));
        }
        let spec = CmBatchSpec::new(records.len() / (2 * k), k)?;
        let mut identities = Vec::with_capacity(spec.p);
        for b in 0..spec.p {
            let block = &records[b * 2 * k..(b + 1) * 2 * k];
            let id = block[0].identity;
            for (pos, r) in block.iter().enumerate() {
                let want = if pos < k { Modality::Rgb } else { Modality::Ir };
                if r.identity != id || r.modality != want {
                    return Err(Error::Input(format!(
                        "record {} breaks the cm-batch layout",
                        b * 2 * k + pos
                    )));
                }
            }
            identities.push(id);
        }
        Self::from_layout(spec, (0..records.len()).collect(), identities)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    #[inline]
    pub fn block_of(&self, pos: usize) -> usize {
        pos / self.spec.block_len()
    }

    #[inline]
    pub fn modality_at(&self, pos: usize) -> Modality {
        if pos % self.spec.block_len() < self.spec.k {
            Modality::Rgb
        } else {
            Modality::Ir
        }
    }

    pub fn identity_at(&self, pos: usize) -> u32 {
        self.identities[self.block_of(pos)]
    }

    /// Identity of every batch position.
    pub fn labels(&self) -> Vec<u32> {
        (0..self.len()).map(|p| self.identity_at(p)).collect()
    }
}

/// Identities with at least one RGB and one IR record, ascending. `k` does
/// not filter: identities short of `k` samples are sampled with replacement.
pub fn eligible_identities(dataset: &EmbeddingDataset, _k: usize) -> Vec<u32> {
    let mut cover: BTreeMap<u32, (bool, bool)> = BTreeMap::new();
    for r in dataset.records() {
        let e = cover.entry(r.identity).or_default();
        match r.modality {
            Modality::Rgb => e.0 = true,
            Modality::Ir => e.1 = true,
        }
    }
    cover
        .into_iter()
        .filter(|(_, (rgb, ir))| *rgb && *ir)
        .map(|(id, _)| id)
        .collect()
}

/// Per-identity record lists, built once and reused across batches.
#[derive(Debug, Clone)]
pub struct CmBatchSampler {
    spec: CmBatchSpec,
    identities: Vec<u32>,
    rgb: Vec<Vec<usize>>,
    ir: Vec<Vec<usize>>,
}

impl CmBatchSampler {
    pub fn new(dataset: &EmbeddingDataset, spec: CmBatchSpec) -> Result<Self> {
        spec.validate()?;
        let identities = eligible_identities(dataset, spec.k);
        if identities.len() < spec.p {
            return Err(Error::Dataset(format!(
                "{} identities have both modalities, but P = {}",
                identities.len(),
                spec.p
            )));
        }
        let slot: BTreeMap<u32, usize> = identities
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect();
        let mut rgb = vec![Vec::new(); identities.len()];
        let mut ir = vec![Vec::new(); identities.len()];
        for (i, r) in dataset.records().iter().enumerate() {
            if let Some(&s) = slot.get(&r.identity) {
                match r.modality {
                    Modality::Rgb => rgb[s].push(i),
                    Modality::Ir => ir[s].push(i),
                }
            }
        }
        Ok(Self {
            spec,
            identities,
            rgb,
            ir,
        })
    }

    pub fn spec(&self) -> CmBatchSpec {
        self.spec
    }

    pub fn identities(&self) -> &[u32] {
        &self.identities
    }

    fn draw<R: Rng + ?Sized>(rng: &mut R, pool: &[usize], k: usize, out: &mut Vec<usize>) {
        if pool.len() >= k {
            out.extend(
                index::sample(rng, pool.len(), k)
                    .into_iter()
                    .map(|i| pool[i]),
            );
        } else {
            out.extend((0..k).map(|_| pool[rng.random_range(0..pool.len())]));
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> CmBatch {
        let CmBatchSpec { p, k } = self.spec;
        let chosen = index::sample(rng, self.identities.len(), p).into_vec();
        let mut indices = Vec::with_capacity(self.spec.batch_size());
        for &s in &chosen {
            Self::draw(rng, &self.rgb[s], k, &mut indices);
            Self::draw(rng, &self.ir[s], k, &mut indices);
        }
        CmBatch {
            spec: self.spec,
            indices,
            identities: chosen.iter().map(|&s| self.identities[s]).collect(),
        }
    }
}

/// One-off cm-batch draw; use [`CmBatchSampler`] in loops.
pub fn sample_cm_batch<R: Rng + ?Sized>(
    dataset: &EmbeddingDataset,
    spec: CmBatchSpec,
    rng: &mut R,
) -> Result<CmBatch> {
    Ok(CmBatchSampler::new(dataset, spec)?.sample(rng))
}
