use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for a parameter set viewed as one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Self {
            step: 0,
            first: vec![0.0; n_params],
            second: vec![0.0; n_params],
            config,
        }
    }

    /// One update over a parameter set split into several tensors. The
    /// tensors are treated as consecutive ranges of the flat moment vectors.
    pub fn step_tensors(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch("tensor count mismatch".into()));
        }
        let mut total = 0;
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter tensor {} vs gradient {}",
                    p.len(),
                    g.len()
                )));
            }
            total += p.len();
        }
        if total != self.first.len() {
            return Err(Error::ShapeMismatch(format!(
                "{total} parameters, optimizer state holds {}",
                self.first.len()
            )));
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteGradient);
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        let mut offset = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            let m = &mut self.first[offset..offset + p.len()];
            let v = &mut self.second[offset..offset + p.len()];
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            offset += p.len();
        }
        Ok(())
    }
}

/// Adam step on a single flat parameter vector.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    state.step_tensors(&mut [params], &[grads])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut state = AdamState::new(2, AdamConfig::default());
        state.first = vec![0.5, -0.5];
        state.second = vec![0.25, 0.25];
        state.step = 3;
        let mut p = vec![1.0, 2.0];
        // m stays nonzero, so the parameters do move; only a fresh state is inert
        let mut fresh = AdamState::new(2, AdamConfig::default());
        let mut q = p.clone();
        adam_step(&mut q, &[0.0, 0.0], &mut fresh).unwrap();
        assert_eq!(q, p);
        adam_step(&mut p, &[0.0, 0.0], &mut state).unwrap();
        assert_eq!(state.first, vec![0.45, -0.45]);
        assert!((state.second[0] - 0.25 * 0.999).abs() < 1e-16);
    }

    #[test]
    fn first_step_is_sign_scaled() {
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(3, cfg);
        let g = [0.3, -2.0, 1e-3];
        let mut p = [0.0; 3];
        adam_step(&mut p, &g, &mut state).unwrap();
        for i in 0..3 {
            let expected = -cfg.lr * g[i] / (g[i].abs() + cfg.eps);
            assert!((p[i] - expected).abs() < 1e-15, "{} vs {}", p[i], expected);
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn descends_quadratic() {
        let mut state = AdamState::new(1, AdamConfig::default());
        let mut x = [1.0];
        let mut losses = vec![0.5 * x[0] * x[0]];
        for _ in 0..2 {
            let g = [x[0]];
            adam_step(&mut x, &g, &mut state).unwrap();
            losses.push(0.5 * x[0] * x[0]);
        }
        assert!(losses[1] < losses[0] && losses[2] < losses[1]);
    }

    #[test]
    fn deterministic_and_checked() {
        let run = || {
            let mut s = AdamState::new(2, AdamConfig::default());
            let mut p = [0.1, 0.2];
            for k in 0..5 {
                adam_step(&mut p, &[k as f64, -0.5], &mut s).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
        let mut s = AdamState::new(2, AdamConfig::default());
        assert!(matches!(
            adam_step(&mut [0.0, 0.0], &[f64::NAN, 0.0], &mut s),
            Err(Error::NonFiniteGradient)
        ));
        assert!(matches!(
            adam_step(&mut [0.0], &[0.0], &mut s),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
