//! Euclidean distances between embeddings and their gradients.

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::matrix::Matrix;

/// Below this distance the gradient of `d(a, b)` is taken to be zero.
pub const SINGULAR_EPS: f64 = 1e-12;

/// Symmetric `n x n` matrix of pairwise Euclidean distances with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `sqrt` of the squared sum, clamped at zero.
#[inline]
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).max(0.0).sqrt()
}

/// Pairwise distances between the rows of `vectors`.
pub fn pairwise_distances(vectors: &Matrix) -> Result<DistanceMatrix> {
    pairwise_distances_with(vectors, Execution::default())
}

pub fn pairwise_distances_with(vectors: &Matrix, exec: Execution) -> Result<DistanceMatrix> {
    if vectors.cols() == 0 {
        return Err(Error::Input("vectors must have dimension >= 1".into()));
    }
    if !vectors.is_finite() {
        return Err(Error::Input("non-finite vector component".into()));
    }
    let n = vectors.rows();
    // Upper triangle only; the lower half is mirrored so symmetry is exact.
    let upper = exec.map(n, |i| {
        let a = vectors.row(i);
        (i + 1..n)
            .map(|j| euclidean(a, vectors.row(j)))
            .collect::<Vec<_>>()
    });
    let mut values = vec![0.0; n * n];
    for (i, row) in upper.into_iter().enumerate() {
        for (off, d) in row.into_iter().enumerate() {
            let j = i + 1 + off;
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix { n, values })
}

/// Pairwise distances for a list of vectors that must share one dimension.
pub fn pairwise_distances_of<V: AsRef<[f64]>>(vectors: &[V]) -> Result<DistanceMatrix> {
    let m = Matrix::from_rows(vectors)
        .ok_or_else(|| Error::Input("vectors have mismatched dimensions".into()))?;
    pairwise_distances(&m)
}

/// Returns `(dd/da, dd/db)` for `d = |a - b|`; both zero when `d <= SINGULAR_EPS`.
pub fn distance_gradient(a: &[f64], b: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::Input(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let d = euclidean(a, b);
    if d <= SINGULAR_EPS {
        return Ok((vec![0.0; a.len()], vec![0.0; a.len()]));
    }
    let ga: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y) / d).collect();
    let gb = ga.iter().map(|g| -g).collect();
    Ok((ga, gb))
}

/// Accumulates `scale * dd/da` into `grad_a` and `scale * dd/db` into `grad_b`,
/// with `d` already known.
#[inline]
pub(crate) fn accumulate_distance_grad(
    a: &[f64],
    b: &[f64],
    d: f64,
    scale: f64,
    grad: &mut Matrix,
    ia: usize,
    ib: usize,
) {
    if d <= SINGULAR_EPS {
        return;
    }
    let s = scale / d;
    for k in 0..a.len() {
        let g = s * (a[k] - b[k]);
        grad.row_mut(ia)[k] += g;
        grad.row_mut(ib)[k] -= g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_vectors() {
        let d = pairwise_distances_of(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(d.row(0), &[0.0, 0.0]);
        assert_eq!(d.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn three_four_five() {
        let d = pairwise_distances_of(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(d.get(0, 1), 5.0);
        assert_eq!(d.get(1, 0), 5.0);
    }

    #[test]
    fn matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vs: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let d = pairwise_distances_of(&vs).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += (vs[i][k] - vs[j][k]).powi(2);
                }
                let oracle = s.sqrt();
                let rel = (d.get(i, j) - oracle).abs() / oracle.max(1e-300);
                assert!(i == j && d.get(i, j) == 0.0 || rel <= 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            pairwise_distances_of(&[vec![0.0, 0.0], vec![1.0]]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            pairwise_distances_of(&[vec![0.0, f64::INFINITY]]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            distance_gradient(&[1.0], &[1.0, 2.0]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn gradient_unit_direction() {
        let (ga, gb) = distance_gradient(&[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(ga, vec![1.0, 0.0]);
        assert_eq!(gb, vec![-1.0, 0.0]);
    }

    #[test]
    fn gradient_at_coincident_points_is_zero() {
        let (ga, gb) = distance_gradient(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert_eq!(ga, vec![0.0, 0.0]);
        assert_eq!(gb, vec![0.0, 0.0]);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..20 {
            let a: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (ga, gb) = distance_gradient(&a, &b).unwrap();
            for k in 0..5 {
                let (mut ap, mut am) = (a.clone(), a.clone());
                ap[k] += h;
                am[k] -= h;
                let fd = (euclidean(&ap, &b) - euclidean(&am, &b)) / (2.0 * h);
                assert!((fd - ga[k]).abs() / ga[k].abs().max(1e-2) <= 1e-6);
                let (mut bp, mut bm) = (b.clone(), b.clone());
                bp[k] += h;
                bm[k] -= h;
                let fd = (euclidean(&a, &bp) - euclidean(&a, &bm)) / (2.0 * h);
                assert!((fd - gb[k]).abs() / gb[k].abs().max(1e-2) <= 1e-6);
            }
        }
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Matrix::from_vec(
            40,
            7,
            (0..280).map(|_| rng.random_range(-3.0..3.0)).collect(),
        );
        let a = pairwise_distances_with(&m, Execution::Sequential).unwrap();
        let b = pairwise_distances_with(&m, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn symmetric_zero_diagonal_triangle(
            flat in proptest::collection::vec(-10.0f64..10.0, 6 * 3)
        ) {
            let m = Matrix::from_vec(6, 3, flat);
            let d = pairwise_distances(&m).unwrap();
            for i in 0..6 {
                prop_assert_eq!(d.get(i, i), 0.0);
                for j in 0..6 {
                    prop_assert!(d.get(i, j) >= 0.0);
                    prop_assert_eq!(d.get(i, j).to_bits(), d.get(j, i).to_bits());
                    for k in 0..6 {
                        prop_assert!(d.get(i, k) <= d.get(i, j) + d.get(j, k) + 1e-9);
                    }
                }
            }
        }
    }
}
