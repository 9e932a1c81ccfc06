//! Bias-corrected Adam with lazily allocated per-parameter state.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Optimizer state keyed by parameter name. Each parameter carries its own
/// step counter, so adding a parameter late does not skew bias correction
/// for the others.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Updates taken so far for a parameter (0 if never stepped).
    pub fn step_count(&self, name: &str) -> u64 {
        self.state.get(name).map_or(0, |s| s.t)
    }

    /// One in-place update of a single parameter.
    pub fn step(&mut self, name: &str, param: &mut [f64], grad: &[f64]) -> Result<()> {
        if grad.len() != param.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                detail: alloc::format!(
                    "{name}: grad length {} != param length {}",
                    grad.len(),
                    param.len()
                ),
            });
        }
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
            t: 0,
        });
        st.t += 1;
        let t = st.t as f64;
        let bc1 = 1.0 - powi(self.cfg.beta1, st.t);
        let bc2 = 1.0 - powi(self.cfg.beta2, st.t);
        debug_assert!(t >= 1.0);
        for i in 0..param.len() {
            let g = grad[i];
            st.m[i] = self.cfg.beta1 * st.m[i] + (1.0 - self.cfg.beta1) * g;
            st.v[i] = self.cfg.beta2 * st.v[i] + (1.0 - self.cfg.beta2) * g * g;
            let m_hat = st.m[i] / bc1;
            let v_hat = st.v[i] / bc2;
            param[i] -= self.cfg.lr * m_hat / (fmath::sqrt(v_hat) + self.cfg.eps);
        }
        Ok(())
    }

    /// Update every trainable parameter in the map from a matching grads
    /// map. A trainable parameter without a grad entry is a contract
    /// violation.
    pub fn apply(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<()> {
        for (name, tensor) in params.iter_mut() {
            if !tensor.requires_grad() {
                continue;
            }
            let grad = grads
                .get(name)
                .ok_or_else(|| Error::MissingGrad(name.clone()))?;
            self.step(name, tensor.data_mut(), grad)?;
        }
        Ok(())
    }
}

fn powi(base: f64, exp: u64) -> f64 {
    let mut acc = 1.0;
    let mut b = base;
    let mut e = exp;
    while e > 0 {
        if e & 1 == 1 {
            acc *= b;
        }
        b *= b;
        e >>= 1;
    }
    acc
}
