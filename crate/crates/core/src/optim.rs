//! AdamW: adaptive moments with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Optimizer state for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, n_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. `what` names the parameter block in the error if any
    /// gradient entry is non-finite; parameters are left untouched then.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], what: &str) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                what: "optimizer parameters vs gradients",
                left: params.len(),
                right: grads.len(),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(format!(
                "{what}: entry {i} = {} (step {})",
                grads[i],
                self.t + 1
            )));
        }
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let decay = 1.0 - lr * weight_decay;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] = params[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::with_lr(0.1)
        };
        let mut opt = AdamW::new(cfg, 3);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..5 {
            opt.step(&mut p, &[0.0; 3], "p").unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn quadratic_converges_to_closed_form_minimum() {
        // f(x) = 3 (x - 1.7)^2, minimum at 1.7
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::with_lr(0.05)
        };
        let mut opt = AdamW::new(cfg, 1);
        let mut x = vec![-2.0];
        for _ in 0..500 {
            let g = 6.0 * (x[0] - 1.7);
            opt.step(&mut x, &[g], "x").unwrap();
        }
        assert!((x[0] - 1.7).abs() < 1e-3, "x = {}", x[0]);
    }

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::with_lr(0.01)
        };
        let mut opt = AdamW::new(cfg, 2);
        let mut p = vec![0.0, 0.0];
        opt.step(&mut p, &[3.0, -0.2], "p").unwrap();
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut opt = AdamW::new(AdamWConfig::default(), 2);
        let mut p = vec![1.0, 1.0];
        let err = opt.step(&mut p, &[0.1, f64::NAN], "hidden").unwrap_err();
        assert!(err.to_string().contains("hidden"));
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(opt.steps(), 0);
    }
}
