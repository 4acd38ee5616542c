use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::model::{Gradients, MaeModel, N_TENSORS, TENSOR_NAMES};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if !ok {
            return Err(Error::invalid(format!("invalid AdamW settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments for every parameter, kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    m: [Vec<f64>; N_TENSORS],
    v: [Vec<f64>; N_TENSORS],
}

impl AdamWState {
    pub fn new<T: Scalar>(model: &MaeModel<T>, config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        let t = model.tensors();
        Ok(AdamWState {
            config,
            step: 0,
            m: std::array::from_fn(|i| vec![0.0; t[i].len()]),
            v: std::array::from_fn(|i| vec![0.0; t[i].len()]),
        })
    }

    pub fn moments(&self) -> (&[Vec<f64>; N_TENSORS], &[Vec<f64>; N_TENSORS]) {
        (&self.m, &self.v)
    }

    /// One decoupled-weight-decay Adam update. The model is left untouched
    /// if the gradient contains NaN or infinity.
    pub fn step<T: Scalar>(&mut self, model: &mut MaeModel<T>, grads: &Gradients) -> Result<()> {
        for (k, (g, p)) in grads.tensors.iter().zip(model.tensors()).enumerate() {
            if g.len() != p.len() {
                return Err(Error::dims(p.len(), g.len()));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient {} at {}[{i}] (step {})",
                    g[i],
                    TENSOR_NAMES[k],
                    self.step + 1
                )));
            }
        }
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, p) in model.tensors_mut().into_iter().enumerate() {
            let g = &grads.tensors[k];
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let theta = p[i].as_f64();
                let next = theta - c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * theta);
                p[i] = T::from_f64_lossy(next);
            }
        }
        if !model.is_finite() {
            return Err(Error::Training(format!(
                "non-finite parameter after step {}",
                self.step
            )));
        }
        Ok(())
    }
}
