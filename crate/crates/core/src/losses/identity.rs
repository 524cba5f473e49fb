use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Softmax cross-entropy averaged over rows, with the gradient w.r.t. logits.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityLossOutput {
    pub value: f64,
    pub grad_logits: Matrix,
}

/// Mean over rows of `-log softmax(logits_i)[class_i]`; classes are 0-based.
pub fn identity_loss(logits: &Matrix, classes: &[usize]) -> Result<IdentityLossOutput> {
    let (n, t) = (logits.rows(), logits.cols());
    if classes.len() != n {
        return Err(Error::Input(format!(
            "{} labels for {n} logit rows",
            classes.len()
        )));
    }
    if n == 0 {
        return Err(Error::Input("identity loss over an empty batch".into()));
    }
    if let Some(&bad) = classes.iter().find(|&&c| c >= t) {
        return Err(Error::Input(format!(
            "class {bad} out of range for {t} classes"
        )));
    }
    if !logits.is_finite() {
        return Err(Error::Numerical("non-finite logits".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, t);
    let mut value = 0.0;
    for (i, &y) in classes.iter().enumerate() {
        let row = logits.row(i);
        let (arg, max) =
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (j, &v)| {
                    if v > bv {
                        (j, v)
                    } else {
                        (bi, bv)
                    }
                });
        // log-sum-exp = max + ln(1 + sum of the other shifted exponentials)
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != arg)
            .map(|(_, &v)| (v - max).exp())
            .sum();
        let lse = max + rest.ln_1p();
        value += lse - row[y];
        let g = grad.row_mut(i);
        for j in 0..t {
            g[j] = (row[j] - lse).exp() * inv_n;
        }
        g[y] -= inv_n;
    }
    Ok(IdentityLossOutput {
        value: value * inv_n,
        grad_logits: grad,
    })
}

/// Linear classifier over embeddings: `score_j = w_j . v + b_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

impl ClassifierHead {
    /// Uniform init in `[-s, s]`, `s = sqrt(6 / (dim + classes))`, zero biases.
    pub fn init<R: Rng + ?Sized>(classes: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Input(format!(
                "classifier needs >= 2 classes, got {classes}"
            )));
        }
        let s = (6.0 / (dim + classes) as f64).sqrt();
        let w = (0..classes * dim)
            .map(|_| rng.random_range(-s..=s))
            .collect();
        Ok(Self {
            weights: Matrix::from_vec(classes, dim, w),
            biases: vec![0.0; classes],
        })
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn forward(&self, embeddings: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(embeddings.rows(), self.classes());
        for i in 0..embeddings.rows() {
            let v = embeddings.row(i);
            for j in 0..self.classes() {
                let w = self.weights.row(j);
                out.set(
                    i,
                    j,
                    w.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() + self.biases[j],
                );
            }
        }
        out
    }

    /// Returns `(d/d embeddings, d/d weights, d/d biases)`.
    pub fn backward(
        &self,
        embeddings: &Matrix,
        grad_logits: &Matrix,
    ) -> (Matrix, Matrix, Vec<f64>) {
        let mut g_emb = Matrix::zeros(embeddings.rows(), self.dim());
        let mut g_w = Matrix::zeros(self.classes(), self.dim());
        let mut g_b = vec![0.0; self.classes()];
        for i in 0..embeddings.rows() {
            let v = embeddings.row(i);
            for j in 0..self.classes() {
                let g = grad_logits.get(i, j);
                if g == 0.0 {
                    continue;
                }
                g_b[j] += g;
                let w = self.weights.row(j);
                for k in 0..self.dim() {
                    g_emb.row_mut(i)[k] += g * w[k];
                    g_w.row_mut(j)[k] += g * v[k];
                }
            }
        }
        (g_emb, g_w, g_b)
    }
}
