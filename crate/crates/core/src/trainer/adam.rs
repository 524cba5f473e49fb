use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Usage("learning rate must be > 0".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Usage(format!("{name} must lie in (0, 1)")));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Usage("adam eps must be > 0".into()));
        }
        Ok(())
    }
}

/// First/second moment estimates for a list of parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::Input("parameter and gradient shapes differ".into()));
    }
    for (ti, g) in grads.iter().enumerate() {
        if let Some(k) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient at tensor {ti} entry {k} (adam step {})",
                state.step + 1
            )));
        }
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for k in 0..p.len() {
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = [1.0, -2.0];
        let mut st = AdamState::new();
        adam_step(
            &mut [&mut p[..]],
            &[vec![0.0, 0.0]],
            &mut st,
            &AdamConfig::default(),
        )
        .unwrap();
        assert_eq!(p, [1.0, -2.0]);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..Default::default()
        };
        let mut p = [0.0, 0.0];
        let mut st = AdamState::new();
        adam_step(&mut [&mut p[..]], &[[3.0, -0.5].to_vec()], &mut st, &cfg).unwrap();
        // m_hat = g, v_hat = g^2 exactly after bias correction
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn descends_a_quadratic() {
        let cfg = AdamConfig {
            learning_rate: 0.05,
            ..Default::default()
        };
        let f = |x: f64| (x - 3.0) * (x - 3.0);
        let mut x = [-1.0];
        let start = f(x[0]);
        let mut st = AdamState::new();
        for _ in 0..100 {
            let g = vec![2.0 * (x[0] - 3.0)];
            adam_step(&mut [&mut x[..]], &[g], &mut st, &cfg).unwrap();
        }
        assert!(f(x[0]) < start);
        assert_eq!(st.step_count(), 100);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut p = [0.0];
        let err = adam_step(
            &mut [&mut p[..]],
            &[vec![f64::NAN]],
            &mut AdamState::new(),
            &AdamConfig::default(),
        );
        assert!(matches!(err, Err(Error::Numerical(_))));
    }

    #[test]
    fn shape_mismatch() {
        let mut p = [0.0];
        let err = adam_step(
            &mut [&mut p[..]],
            &[vec![1.0, 2.0]],
            &mut AdamState::new(),
            &AdamConfig::default(),
        );
        assert!(matches!(err, Err(Error::Input(_))));
    }
}
