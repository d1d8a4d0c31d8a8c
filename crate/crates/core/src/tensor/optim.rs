use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates plus the shared step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            state: OptimizerState::default(),
        }
    }

    /// One update at the configured learning rate.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients<f32>) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(params, grads, lr)
    }

    /// One update at an explicit learning rate (for schedules).
    ///
    /// Parameters without a gradient entry are left untouched.
    pub fn step_with_lr(&mut self, params: &mut ParamSet, grads: &Gradients<f32>, lr: f64) -> Result<()> {
        let c = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            if p.len() != g.len() {
                return Err(Error::LengthMismatch {
                    what: "gradient vs parameter",
                    expected: p.len(),
                    got: g.len(),
                });
            }
            let m = self.state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                let m_new = c.beta1 * *mi as f64 + (1.0 - c.beta1) * gi;
                let v_new = c.beta2 * *vi as f64 + (1.0 - c.beta2) * gi * gi;
                *mi = m_new as f32;
                *vi = v_new as f32;
                let mhat = m_new / bc1;
                let vhat = v_new / bc2;
                let pv = *pi as f64;
                *pi = (pv - lr * c.weight_decay * pv - lr * mhat / (vhat.sqrt() + c.eps)) as f32;
            }
        }
        Ok(())
    }

    /// Drops moment columns of `name` so they follow a pruned parameter.
    pub fn select_columns(&mut self, name: &str, shape: &[usize], columns: &[usize]) -> Result<()> {
        for store in [&mut self.state.m, &mut self.state.v] {
            if let Some(buf) = store.get_mut(name) {
                let t = Tensor::new(shape.to_vec(), std::mem::take(buf))?;
                *buf = t.select_columns(columns)?.into_data();
            }
        }
        Ok(())
    }
}

/// Linear warmup over the first `warmup_steps`, then constant.
pub fn warmup_lr(base: f64, step: usize, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        base
    } else {
        base * (step + 1) as f64 / warmup_steps as f64
    }
}
