use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn with_b1(mut self, b1: f64) -> Self {
        self.b1 = b1;
        self
    }
}

/// Adam with bias correction. Moments are aligned with the tensors of the
/// [`ParamStore`] the optimizer was created for.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if !(self.config.lr > 0.0) {
            return Err(AutodiffError::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.config.lr
            )));
        }
        if grads.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam_step",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        for ((t, g), m) in params.tensors().iter().zip(grads).zip(&self.first_moment) {
            if t.len() != g.len() || t.len() != m.len() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam_step",
                    left: t.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
        }

        self.step_count += 1;
        let AdamConfig { lr, b1, b2, eps } = self.config;
        let bc1 = 1.0 - b1.powi(self.step_count as i32);
        let bc2 = 1.0 - b2.powi(self.step_count as i32);
        for (((t, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((p, &gi), mi), vi) in t.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn single(p: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(p));
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = single(0.0);
        let mut adam = AdamState::new(AdamConfig::new(0.1).with_b1(0.5), &params);
        adam.step(&mut params, &[vec![1.0]]).unwrap();
        // m_hat = 1, v_hat = 1.
        let p = params.tensors()[0].data()[0];
        assert!((p + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut params = single(2.0);
        let mut adam = AdamState::new(AdamConfig::new(0.1), &params);
        adam.step(&mut params, &[vec![1.0]]).unwrap();
        let after_one = params.clone();
        let m1 = adam.first_moment[0][0];
        // With g = 0 the numerator decays but stays nonzero, so the
        // parameter still moves; only a fresh optimizer leaves it unchanged.
        let mut fresh_params = single(2.0);
        let mut fresh = AdamState::new(AdamConfig::new(0.1), &fresh_params);
        fresh.step(&mut fresh_params, &[vec![0.0]]).unwrap();
        assert_eq!(fresh_params, single(2.0));
        adam.step(&mut params, &[vec![0.0]]).unwrap();
        assert!(adam.first_moment[0][0].abs() < m1.abs());
        assert_ne!(params, after_one);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = single(0.0);
        let mut adam = AdamState::new(AdamConfig::new(0.1), &params);
        assert!(adam.step(&mut params, &[vec![1.0, 2.0]]).is_err());
        assert!(adam.step(&mut params, &[]).is_err());
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let mut params = single(0.3);
            let mut adam = AdamState::new(AdamConfig::new(0.01).with_b1(0.5), &params);
            for i in 0..50 {
                let g = (i as f64 * 0.37).sin();
                adam.step(&mut params, &[vec![g]]).unwrap();
            }
            params.tensors()[0].data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
