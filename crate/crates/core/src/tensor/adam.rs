use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Decoupled (AdamW-style) decay when true; otherwise the decay term is
    /// folded into the gradient before the moment updates.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-5,
            decoupled: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = |p: &super::Parameter| vec![0.0; p.value.len()];
        AdamState {
            config,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from the gradients accumulated on `params`.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer built for {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad.as_ref().expect("checked above");
            if grad.shape() != p.value.shape() {
                return Err(Error::shape("adam", p.value.shape(), grad.shape()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = grad.data().to_vec();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let mut g = grad[j];
                if !c.decoupled {
                    g += c.weight_decay * *w;
                }
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let mut delta = c.lr * m_hat / (v_hat.sqrt() + c.eps);
                if c.decoupled {
                    delta += c.lr * c.weight_decay * *w;
                }
                *w -= delta;
            }
        }
        Ok(())
    }
}
