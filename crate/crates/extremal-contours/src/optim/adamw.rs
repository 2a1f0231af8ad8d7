//! Decoupled-weight-decay adaptive-moment updates, implemented directly so
//! trajectories are deterministic and dependency-free.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamWState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamWState {
    pub fn new(dim: usize) -> Self {
        AdamWState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update with decoupled weight decay:
    /// `θ ← θ − η·( m̂/(√v̂+ε) + wd·θ )`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &AdamWConfig) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "optimizer state dimension mismatch");
        assert_eq!(grads.len(), self.m.len(), "gradient dimension mismatch");
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient",
                iteration: self.step as usize,
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -=
                cfg.learning_rate * (m_hat / (v_hat.sqrt() + cfg.epsilon) + cfg.weight_decay * params[i]);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight transcription of the update recurrence, one scalar at a
    /// time, kept independent of the vectorized implementation.
    struct ScalarReference {
        m: f64,
        v: f64,
        t: i32,
    }

    impl ScalarReference {
        fn new() -> Self {
            ScalarReference {
                m: 0.0,
                v: 0.0,
                t: 0,
            }
        }

        fn step(&mut self, theta: f64, g: f64, cfg: &AdamWConfig) -> f64 {
            self.t += 1;
            self.m = cfg.beta1 * self.m + (1.0 - cfg.beta1) * g;
            self.v = cfg.beta2 * self.v + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m / (1.0 - cfg.beta1.powi(self.t));
            let v_hat = self.v / (1.0 - cfg.beta2.powi(self.t));
            theta - cfg.learning_rate * (m_hat / (v_hat.sqrt() + cfg.epsilon) + cfg.weight_decay * theta)
        }
    }

    #[test]
    fn zero_gradient_and_zero_decay_leave_params_fixed() {
        let cfg = AdamWConfig::default();
        let mut state = AdamWState::new(4);
        let mut params = vec![0.3, -0.7, 1.2, 0.0];
        let before = params.clone();
        state.step(&mut params, &[0.0; 4], &cfg).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_matches_scalar_reference() {
        let cfg = AdamWConfig::default();
        let grads = [0.4, -2.0, 1e-3, 7.0];
        let mut params = vec![1.0, 0.5, -0.25, 2.0];
        let expected: Vec<f64> = params
            .iter()
            .zip(&grads)
            .map(|(&p, &g)| ScalarReference::new().step(p, g, &cfg))
            .collect();
        let mut state = AdamWState::new(4);
        state.step(&mut params, &grads, &cfg).unwrap();
        for (p, e) in params.iter().zip(&expected) {
            assert!((p - e).abs() < 1e-15);
        }
        // first step with wd = 0 is ≈ −η·g/(|g|+ε)
        for (i, &g) in grads.iter().enumerate() {
            let update = params[i] - [1.0, 0.5, -0.25, 2.0][i];
            let approx = -cfg.learning_rate * g / (g.abs() + cfg.epsilon);
            assert!((update - approx).abs() < 1e-9, "update {update} vs {approx}");
        }
    }

    #[test]
    fn long_run_matches_scalar_reference() {
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..AdamWConfig::default()
        };
        let mut state = AdamWState::new(1);
        let mut reference = ScalarReference::new();
        let mut p = vec![0.9];
        let mut p_ref = 0.9;
        for t in 0..200 {
            let g = (t as f64 * 0.13).sin();
            state.step(&mut p, &[g], &cfg).unwrap();
            p_ref = reference.step(p_ref, g, &cfg);
            assert!((p[0] - p_ref).abs() < 1e-12, "diverged at step {t}");
        }
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let cfg = AdamWConfig::default();
        let run = || {
            let mut state = AdamWState::new(3);
            let mut p = vec![0.1, -0.2, 0.3];
            for t in 0..50 {
                let g = [
                    (t as f64).cos(),
                    0.5 - t as f64 * 0.01,
                    (t as f64 * 0.7).sin(),
                ];
                state.step(&mut p, &g, &cfg).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let cfg = AdamWConfig::default();
        let mut state = AdamWState::new(2);
        let mut p = vec![0.0, 0.0];
        let err = state.step(&mut p, &[1.0, f64::NAN], &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFinite { what: "gradient", .. }));
    }
}
