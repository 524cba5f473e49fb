//! Embedding records and the dataset container shared by every stage.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Rgb,
    Ir,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Rgb => 0,
            Modality::Ir => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Modality::Rgb),
            1 => Ok(Modality::Ir),
            other => Err(Error::Format(format!("unknown modality code {other}"))),
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Modality::Rgb => Modality::Ir,
            Modality::Ir => Modality::Rgb,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Rgb => "RGB",
            Modality::Ir => "IR",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "RGB" => Ok(Modality::Rgb),
            "IR" => Ok(Modality::Ir),
            other => Err(Error::Format(format!("unknown modality {other:?}"))),
        }
    }
}

/// One sample: identity label, modality, camera and its feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub identity: u32,
    pub modality: Modality,
    pub camera: u8,
    pub vector: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn new(identity: u32, modality: Modality, camera: u8, vector: Vec<f64>) -> Self {
        Self {
            identity,
            modality,
            camera,
            vector,
        }
    }
}

/// Ordered records of a common dimension. A record's position is its index
/// for the lifetime of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDataset {
    dim: usize,
    records: Vec<EmbeddingRecord>,
}

impl EmbeddingDataset {
    /// Validates dimension and finiteness of every record.
    pub fn new(dim: usize, records: Vec<EmbeddingRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("dimension must be positive".into()));
        }
        for (i, r) in records.iter().enumerate() {
            if r.vector.len() != dim {
                return Err(Error::Input(format!(
                    "record {i} has dimension {}, expected {dim}",
                    r.vector.len()
                )));
            }
            if let Some(k) = r.vector.iter().position(|v| !v.is_finite()) {
                return Err(Error::Input(format!(
                    "record {i} component {k} is not finite"
                )));
            }
        }
        Ok(Self { dim, records })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn record(&self, index: usize) -> &EmbeddingRecord {
        &self.records[index]
    }

    pub fn into_records(self) -> Vec<EmbeddingRecord> {
        self.records
    }

    /// Distinct identity labels, ascending.
    pub fn identities(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.records.iter().map(|r| r.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Feature vectors of the given records stacked as matrix rows.
    pub fn gather(&self, indices: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(indices.len(), self.dim);
        for (row, &i) in indices.iter().enumerate() {
            m.row_mut(row).copy_from_slice(&self.records[i].vector);
        }
        m
    }

    pub fn vectors(&self) -> Vec<&[f64]> {
        self.records.iter().map(|r| r.vector.as_slice()).collect()
    }

    /// Same metadata, new vectors (one row per record).
    pub fn with_vectors(&self, vectors: &Matrix) -> Result<Self> {
        if vectors.rows() != self.records.len() {
            return Err(Error::Input(format!(
                "{} vectors for {} records",
                vectors.rows(),
                self.records.len()
            )));
        }
        let records = self
            .records
            .iter()
            .zip(vectors.iter_rows())
            .map(|(r, v)| EmbeddingRecord::new(r.identity, r.modality, r.camera, v.to_vec()))
            .collect();
        Self::new(vectors.cols(), records)
    }

    /// Splits off a held-out part: within every (identity, modality) group,
    /// the last `floor(n * fraction)` records in dataset order are held out.
    /// Returns `(train, held_out)`.
    pub fn split_holdout(&self, fraction: f64) -> Result<(Self, Self)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Usage(format!(
                "holdout fraction {fraction} outside [0, 1]"
            )));
        }
        let mut group_sizes = std::collections::BTreeMap::new();
        for r in &self.records {
            *group_sizes
                .entry((r.identity, r.modality))
                .or_insert(0usize) += 1;
        }
        let mut seen = std::collections::BTreeMap::new();
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for r in &self.records {
            let key = (r.identity, r.modality);
            let n = group_sizes[&key];
            let held_count = (n as f64 * fraction).floor() as usize;
            let pos = seen.entry(key).or_insert(0usize);
            if *pos >= n - held_count {
                held.push(r.clone());
            } else {
                train.push(r.clone());
            }
            *pos += 1;
        }
        Ok((Self::new(self.dim, train)?, Self::new(self.dim, held)?))
    }
}
