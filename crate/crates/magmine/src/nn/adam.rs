//! Bias-corrected Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64, weight_decay: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    /// One update. Decoupled weight decay is applied to the parameters before
    /// the moment update; aborts on non-finite gradients.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "optimizer/param shape mismatch");
        assert_eq!(grads.len(), self.m.len(), "optimizer/grad shape mismatch");
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient at flat index {i} is {} at optimizer step {}",
                grads[i],
                self.step + 1
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            if self.weight_decay != 0.0 {
                params[i] -= self.lr * self.weight_decay * params[i];
            }
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut adam = AdamState::new(3, 1e-3, 0.0);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_is_signed_lr() {
        // at step 1 the bias correction makes m_hat/sqrt(v_hat) = sign(g) up to eps
        let mut adam = AdamState::new(2, 1e-3, 0.0);
        let mut p = vec![0.0, 0.0];
        adam.step(&mut p, &[0.37, -123.0]).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-7, "{}", p[0]);
        assert!((p[1] - 1e-3).abs() < 1e-7, "{}", p[1]);
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut adam = AdamState::new(2, 1e-2, 5e-4);
            let mut p = vec![1.0, -1.0];
            for i in 0..10 {
                adam.step(&mut p, &[0.1 * i as f64, -0.2]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut adam = AdamState::new(1, 1e-3, 0.0);
        let mut p = vec![0.0];
        assert!(matches!(adam.step(&mut p, &[f64::NAN]), Err(Error::NonFinite(_))));
    }
}
