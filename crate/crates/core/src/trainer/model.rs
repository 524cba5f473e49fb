use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// `y = W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    /// Uniform in `[-s, s]` with `s = sqrt(6 / (fan_in + fan_out))`; zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let s = (6.0 / (input + output) as f64).sqrt();
        let w = (0..input * output)
            .map(|_| rng.random_range(-s..=s))
            .collect();
        Self {
            weights: Matrix::from_vec(output, input, w),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.output_dim());
        for i in 0..x.rows() {
            let xi = x.row(i);
            let oi = out.row_mut(i);
            for (o, (w, b)) in oi.iter_mut().zip(self.weights.iter_rows().zip(&self.bias)) {
                *o = w.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() + b;
            }
        }
        out
    }
}

/// One or two affine maps with an elementwise `max(0, x)` between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    pub layers: Vec<Affine>,
}

/// Layer inputs and hidden pre-activations recorded by the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

/// Parameter gradients, one `(weights, bias)` pair per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl EmbeddingModel {
    /// `hidden_dim = None` gives a single affine map.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dim: Option<usize>,
        output_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden_dim == Some(0) {
            return Err(Error::Usage("model dimensions must be positive".into()));
        }
        let layers = match hidden_dim {
            None => vec![Affine::init(input_dim, output_dim, rng)],
            Some(h) => vec![
                Affine::init(input_dim, h, rng),
                Affine::init(h, output_dim, rng),
            ],
        };
        Ok(Self { layers })
    }

    pub fn identity(dim: usize) -> Self {
        let mut w = Matrix::zeros(dim, dim);
        for i in 0..dim {
            w.set(i, i, 1.0);
        }
        Self {
            layers: vec![Affine {
                weights: w,
                bias: vec![0.0; dim],
            }],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Affine::output_dim).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.layers.len() > 2 {
            return Err(Error::Format(format!(
                "model has {} layers",
                self.layers.len()
            )));
        }
        for w in self.layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::Format("layer dimensions do not chain".into()));
            }
        }
        for l in &self.layers {
            if l.bias.len() != l.output_dim() {
                return Err(Error::Format("bias length does not match layer".into()));
            }
            if !l.weights.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::Numerical("non-finite model parameter".into()));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::Input(format!(
                "model expects dimension {}, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(x)?;
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::new(),
        };
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            cache.inputs.push(h);
            h = if i + 1 < self.layers.len() {
                let mut a = z.clone();
                a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                cache.pre_activations.push(z);
                a
            } else {
                z
            };
        }
        Ok((h, cache))
    }

    /// Backpropagates `grad_out` (d loss / d output rows).
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Matrix) -> ModelGrads {
        let mut layers = vec![(Matrix::zeros(0, 0), Vec::new()); self.layers.len()];
        let mut g = grad_out.clone();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[li];
            let mut gw = Matrix::zeros(layer.output_dim(), layer.input_dim());
            let mut gb = vec![0.0; layer.output_dim()];
            let mut gx = Matrix::zeros(x.rows(), layer.input_dim());
            for i in 0..x.rows() {
                let xi = x.row(i);
                let gi = g.row(i);
                for (o, &go) in gi.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    gb[o] += go;
                    let w = layer.weights.row(o);
                    let gwo = gw.row_mut(o);
                    for k in 0..xi.len() {
                        gwo[k] += go * xi[k];
                    }
                    let gxi = gx.row_mut(i);
                    for k in 0..w.len() {
                        gxi[k] += go * w[k];
                    }
                }
            }
            layers[li] = (gw, gb);
            if li > 0 {
                // through max(0, z): the kink itself passes no gradient
                let z = &cache.pre_activations[li - 1];
                for (gv, zv) in gx.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    if *zv <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            g = gx;
        }
        ModelGrads { layers }
    }

    /// Flat views of all parameters: weights then bias, per layer.
    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weights.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    /// Smallest `|z|` over hidden pre-activations, or infinity for one layer.
    pub fn min_abs_pre_activation(&self, x: &Matrix) -> Result<f64> {
        let (_, cache) = self.forward_cached(x)?;
        Ok(cache
            .pre_activations
            .iter()
            .flat_map(|z| z.as_slice().iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs())))
    }
}

impl ModelGrads {
    pub fn into_flat(self) -> Vec<Vec<f64>> {
        self.layers
            .into_iter()
            .flat_map(|(w, b)| [w.as_slice().to_vec(), b])
            .collect()
    }
}
