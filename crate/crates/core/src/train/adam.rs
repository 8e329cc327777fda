use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

use super::config::AdamConfig;

#[derive(Debug, Clone)]
pub(crate) struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

/// Adaptive-moment optimizer with per-parameter step counts.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    pub(crate) state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one update to every parameter in `params` that has a gradient.
    pub fn step(&mut self, params: &[(String, Var)], grads: &GradStore) -> Result<usize> {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let mut updated = 0;
        for (name, var) in params {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = g.detach();
            let entry = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: g.zeros_like().expect("zeros"),
                v: g.zeros_like().expect("zeros"),
                t: 0,
            });
            entry.t += 1;
            entry.m = ((&entry.m * beta1)? + (&g * (1.0 - beta1))?)?;
            entry.v = ((&entry.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&entry.m / (1.0 - beta1.powi(entry.t as i32)))?;
            let v_hat = (&entry.v / (1.0 - beta2.powi(entry.t as i32)))?;
            let delta = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let next = (var.as_tensor().detach() - (delta * lr)?)?;
            var.set(&next)?;
            updated += 1;
        }
        Ok(updated)
    }
}
