use super::{Gradients, NetDims, NetworkParams};
use crate::error::{CirlError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the gradient to this global norm when it is exceeded.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

/// Adaptive-moment accumulators mirroring a network's parameter layout.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    dims: NetDims,
    first: Vec<f64>,
    second: Vec<f64>,
    step_count: u64,
}

impl OptimizerState {
    pub fn new(dims: NetDims, config: AdamConfig) -> Result<Self> {
        if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
            return Err(CirlError::invalid("learning rate must be positive and finite"));
        }
        Ok(OptimizerState {
            config,
            dims,
            first: vec![0.0; dims.param_count()],
            second: vec![0.0; dims.param_count()],
            step_count: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update in place. Rejects non-finite gradients before touching
    /// any state, naming the first offending parameter.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &Gradients) -> Result<()> {
        if params.dims() != self.dims || grads.dims() != self.dims {
            return Err(CirlError::invalid("optimizer/parameter/gradient shapes disagree"));
        }
        if let Some(i) = grads.as_slice().iter().position(|g| !g.is_finite()) {
            return Err(CirlError::NonFiniteGradient {
                parameter: self.dims.param_name(i),
            });
        }
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = grads.norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let t = self.step_count as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        let step_size = learning_rate / bias1;
        let data = params.as_mut_slice();
        for (((w, &g), m), v) in data
            .iter_mut()
            .zip(grads.as_slice())
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            let g = g * clip;
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *w -= step_size * *m / ((*v / bias2).sqrt() + eps);
        }
        Ok(())
    }
}

/// Functional form: returns the updated parameters and state.
pub fn optimizer_step(
    params: &NetworkParams,
    grads: &Gradients,
    state: &OptimizerState,
) -> Result<(NetworkParams, OptimizerState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    s.step(&mut p, grads)?;
    Ok((p, s))
}
