use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingDataset, EmbeddingRecord, Modality};
use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

pub const RGB_CAMERAS: [u8; 4] = [1, 2, 4, 5];
pub const IR_CAMERAS: [u8; 2] = [3, 6];

/// Gaussian identity clusters with a per-identity IR shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    pub samples_per_identity_per_modality: usize,
    pub input_dim: usize,
    /// Standard deviation of the cluster centres.
    pub identity_spread: f64,
    /// Length of each identity's RGB -> IR offset vector.
    pub modality_offset: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_identities: 5,
            samples_per_identity_per_modality: 20,
            input_dim: 16,
            identity_spread: 1.0,
            modality_offset: 1.5,
            noise_sigma: 0.3,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::Usage("need at least 2 identities".into()));
        }
        if self.samples_per_identity_per_modality == 0 || self.input_dim == 0 {
            return Err(Error::Usage(
                "sample count and input dimension must be positive".into(),
            ));
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.identity_spread) || !ok(self.modality_offset) || !ok(self.noise_sigma) {
            return Err(Error::Usage(
                "spread, offset and sigma must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Records are grouped per identity, RGB samples first. Sample `j` of a
/// modality sits on camera `RGB_CAMERAS[j % 4]` or `IR_CAMERAS[j % 2]`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<EmbeddingDataset> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let d = spec.input_dim;
    let gauss = |n: usize, rng: &mut _| -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    };
    let mut records =
        Vec::with_capacity(2 * spec.num_identities * spec.samples_per_identity_per_modality);
    for id in 0..spec.num_identities {
        let center: Vec<f64> = gauss(d, &mut rng)
            .iter()
            .map(|v| v * spec.identity_spread)
            .collect();
        let dir = gauss(d, &mut rng);
        let norm = dir
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        let offset: Vec<f64> = dir
            .iter()
            .map(|v| v / norm * spec.modality_offset)
            .collect();
        for modality in [Modality::Rgb, Modality::Ir] {
            for j in 0..spec.samples_per_identity_per_modality {
                let noise = gauss(d, &mut rng);
                let vector = (0..d)
                    .map(|k| {
                        let shift = if modality == Modality::Ir {
                            offset[k]
                        } else {
                            0.0
                        };
                        center[k] + shift + spec.noise_sigma * noise[k]
                    })
                    .collect();
                let camera = match modality {
                    Modality::Rgb => RGB_CAMERAS[j % RGB_CAMERAS.len()],
                    Modality::Ir => IR_CAMERAS[j % IR_CAMERAS.len()],
                };
                records.push(EmbeddingRecord::new(id as u32, modality, camera, vector));
            }
        }
    }
    EmbeddingDataset::new(d, records)
}
