use serde::{Deserialize, Serialize};

use crate::{Error, Result};

use super::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its accumulated gradient:
    /// `p ← p − lr·λ·p − lr·m̂/(√v̂ + ε)`.
    pub fn step<T: Scalar>(&mut self, params: Vec<&mut Tensor<T>>, lr: f64) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(&params).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::ShapeMismatch {
                layer: "adamw".into(),
                detail: "optimizer state does not match the parameter list".into(),
            });
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let (data, grad) = p.data_and_grad();
            let grad = grad.ok_or_else(|| Error::InvalidArgument("parameter has no gradient".into()))?;
            for i in 0..data.len() {
                let g = grad[i].as_f64();
                let mut x = data[i].as_f64();
                x -= lr * weight_decay * x;
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                x -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                data[i] = T::of(x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64, g: f64) -> Tensor<f64> {
        let mut t = Tensor::param(vec![1], vec![x]);
        t.grad_mut().unwrap()[0] = g;
        t
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut p = scalar(1.5, 0.0);
        opt.step(vec![&mut p], 0.1).unwrap();
        assert_eq!(p.data()[0], 1.5);
    }

    #[test]
    fn decay_only_shrinks_by_lr_lambda() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = scalar(2.0, 0.0);
        opt.step(vec![&mut p], 0.01).unwrap();
        assert_eq!(p.data()[0], 2.0 - 0.01 * 0.05 * 2.0);
    }

    #[test]
    fn single_step_closed_form() {
        let cfg = AdamWConfig {
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.05,
        };
        let mut opt = AdamW::new(cfg);
        let (x, g, lr) = (0.7, -0.3, 0.01);
        let mut p = scalar(x, g);
        opt.step(vec![&mut p], lr).unwrap();
        let m_hat = (1.0 - 0.8) * g / (1.0 - 0.8);
        let v_hat = (1.0 - 0.99) * g * g / (1.0 - 0.99);
        let expect = x * (1.0 - lr * 0.05) - lr * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.data()[0] - expect).abs() < 1e-12);
    }
}
