use serde::{Deserialize, Serialize};

use super::OptimError;
use crate::numkern::{Parameters, Real};

/// AdamW hyperparameters. Defaults are the usual β₁=0.9, β₂=0.999, ε=1e-8.
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
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers and step count for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamWState {
    pub fn new(len: usize, config: AdamWConfig) -> Self {
        Self {
            step: 0,
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// Bias-corrected `(m̂, v̂)` at the current step.
    pub fn bias_corrected(&self) -> (Vec<f64>, Vec<f64>) {
        if self.step == 0 {
            return (self.m.clone(), self.v.clone());
        }
        let c1 = 1.0 - self.config.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.config.beta2.powi(self.step as i32);
        (
            self.m.iter().map(|m| m / c1).collect(),
            self.v.iter().map(|v| v / c2).collect(),
        )
    }
}

/// One decoupled-weight-decay Adam update:
/// `θ ← θ − lr·(m̂/(√v̂+ε) + wd·θ)`.
pub fn adamw_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamWState,
) -> Result<(), OptimError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(OptimError::ShapeMismatch {
            params: params.len(),
            grads: grads.len(),
            state: state.m.len(),
        });
    }
    let AdamWConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    state.step += 1;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let g = g.f64();
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        let theta = p.f64();
        *p = T::of(theta - lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * theta));
    }
    Ok(())
}

/// AdamW over every tensor of a model; weight decay only on tensors the
/// model marks as decayable.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    states: Vec<AdamWState>,
}

impl AdamW {
    pub fn new<T: Real, P: Parameters<T>>(model: &P, config: AdamWConfig) -> Self {
        let states = model
            .tensors()
            .iter()
            .zip(model.decay_mask())
            .map(|(t, decay)| {
                let mut c = config;
                if !decay {
                    c.weight_decay = 0.0;
                }
                AdamWState::new(t.len(), c)
            })
            .collect();
        Self { config, states }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn states(&self) -> &[AdamWState] {
        &self.states
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
        for s in &mut self.states {
            s.config.lr = lr;
        }
    }

    pub fn step<T: Real, P: Parameters<T>>(
        &mut self,
        model: &mut P,
        grads: &P,
    ) -> Result<(), OptimError> {
        let gs = grads.tensors();
        let mut ps = model.tensors_mut();
        if ps.len() != gs.len() || ps.len() != self.states.len() {
            return Err(OptimError::TensorCount {
                params: ps.len(),
                grads: gs.len(),
                state: self.states.len(),
            });
        }
        for ((p, g), s) in ps.iter_mut().zip(gs).zip(&mut self.states) {
            adamw_step(p, g, s)?;
        }
        Ok(())
    }
}
