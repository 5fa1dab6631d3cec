//! Adam with bias correction and decoupled weight decay.

use super::{NumericsError, RealTensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 2.5e-5,
        }
    }
}

impl AdamConfig {
    fn validate(&self) -> Result<(), NumericsError> {
        let ok = self.lr > 0.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2);
        if ok {
            Ok(())
        } else {
            Err(NumericsError::Hyperparameter(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<RealTensor>,
    pub v: Vec<RealTensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[RealTensor]) -> Result<Self, NumericsError> {
        config.validate()?;
        let zeros: Vec<_> = params.iter().map(|p| RealTensor::zeros(p.shape())).collect();
        Ok(Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        })
    }

    /// One update of every parameter. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut [RealTensor], grads: &[RealTensor]) -> Result<(), NumericsError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(NumericsError::NanGradient { index: i });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        Ok(())
    }
}
