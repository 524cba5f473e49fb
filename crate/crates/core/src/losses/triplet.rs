use crate::distance::squared_distance;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::LossOutput;

/// `sum_i [|a_i - p_i|^2 - |a_i - n_i|^2 + margin]_+` over explicit triplets.
///
/// Gradient rows are laid out `a_0, p_0, n_0, a_1, ...`.
pub fn triplet_loss<V: AsRef<[f64]>>(triplets: &[(V, V, V)], margin: f64) -> Result<LossOutput> {
    let dim = triplets.first().map(|t| t.0.as_ref().len()).unwrap_or(0);
    let mut grad = Matrix::zeros(3 * triplets.len(), dim);
    let mut value = 0.0;
    let mut active_count = 0;
    for (i, (a, p, n)) in triplets.iter().enumerate() {
        let (a, p, n) = (a.as_ref(), p.as_ref(), n.as_ref());
        if a.len() != dim || p.len() != dim || n.len() != dim {
            return Err(Error::Input(format!(
                "triplet {i} has mismatched dimensions"
            )));
        }
        let term = squared_distance(a, p) - squared_distance(a, n) + margin;
        if term > 0.0 {
            value += term;
            active_count += 1;
            for k in 0..dim {
                grad.row_mut(3 * i)[k] += 2.0 * (n[k] - p[k]);
                grad.row_mut(3 * i + 1)[k] -= 2.0 * (a[k] - p[k]);
                grad.row_mut(3 * i + 2)[k] += 2.0 * (a[k] - n[k]);
            }
        }
    }
    Ok(LossOutput {
        value,
        grad,
        active_count,
    })
}

/// True iff `|a - p|^2 + margin < |a - n|^2` (strict).
pub fn margin_satisfied(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> bool {
    squared_distance(a, p) + margin < squared_distance(a, n)
}
