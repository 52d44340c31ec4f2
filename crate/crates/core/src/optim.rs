//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates for one flat parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &AdamWConfig) {
        assert_eq!(
            params.len(),
            grads.len(),
            "parameter/gradient length mismatch"
        );
        if self.m.len() != params.len() {
            *self = AdamState::new(params.len());
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *p -= lr * cfg.weight_decay * *p;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = vec![1.0, -2.0, 0.5];
        let before = p.clone();
        let mut s = AdamState::new(3);
        s.step(&mut p, &[0.3, -0.1, 9.0], 0.0, &AdamWConfig::default());
        assert_eq!(p, before);
        assert_eq!(s.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        s.step(&mut p, &[2.0, -0.001], 5e-3, &cfg);
        assert!((p[0] + 5e-3).abs() < 1e-10);
        assert!((p[1] - 5e-3).abs() < 1e-7);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = AdamWConfig::default();
        let mut p = vec![3.0];
        let mut s = AdamState::new(1);
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0)];
            s.step(&mut p, &g, 0.05, &cfg);
        }
        assert!((p[0] - 1.0).abs() < 0.05, "{}", p[0]);
    }
}
