//! Hyperparameters shared by the training loops.

use crate::error::{CirlError, Result};
use crate::seqnet::AdamConfig;

/// Temporal-difference training with a target network and an epsilon schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct TdHyper {
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Target network sync period `M^-`.
    pub target_sync: usize,
    /// Training iterations `M`.
    pub iterations: usize,
    pub epsilon_max: f64,
    pub epsilon_min: f64,
    /// Linear decay per iteration.
    pub epsilon_decay: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Iterations between convergence-log rows.
    pub log_every: usize,
}

impl TdHyper {
    /// Feature-expectation network defaults.
    pub fn mu_defaults() -> Self {
        TdHyper {
            hidden_dim: 128,
            batch_size: 256,
            learning_rate: 1e-3,
            target_sync: 100,
            iterations: 20_000,
            epsilon_max: 0.9,
            epsilon_min: 0.0,
            epsilon_decay: 1e-5,
            clip_norm: Some(10.0),
            seed: 0,
            log_every: 100,
        }
    }

    /// Candidate-policy Q-network defaults (same table values as the mu network).
    pub fn policy_defaults() -> Self {
        TdHyper::mu_defaults()
    }

    /// Expert Q-network defaults.
    pub fn expert_defaults() -> Self {
        TdHyper {
            target_sync: 200,
            iterations: 40_000,
            epsilon_decay: 5e-5,
            ..TdHyper::mu_defaults()
        }
    }

    /// Scale iteration counts by `budget`. The epsilon decay rate is scaled
    /// inversely so the schedule covers the same fraction of training.
    pub fn with_budget(&self, budget: f64) -> Self {
        let mut h = self.clone();
        h.iterations = scale_count(self.iterations, budget);
        h.epsilon_decay = self.epsilon_decay / budget;
        h
    }

    pub fn epsilon(&self, iteration: usize) -> f64 {
        (self.epsilon_max - self.epsilon_decay * iteration as f64).max(self.epsilon_min)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.batch_size == 0 || self.target_sync == 0 || self.log_every == 0 {
            return Err(CirlError::invalid(
                "hidden_dim, batch_size, target_sync and log_every must be >= 1",
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(CirlError::invalid("learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.epsilon_min) || !(0.0..=1.0).contains(&self.epsilon_max) {
            return Err(CirlError::invalid("epsilon bounds must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Supervised sequence-model training (propensity and dynamics networks).
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedHyper {
    pub hidden_dim: usize,
    /// Trajectories per minibatch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for SupervisedHyper {
    fn default() -> Self {
        SupervisedHyper {
            hidden_dim: 64,
            batch_size: 64,
            learning_rate: 1e-3,
            iterations: 3_000,
            clip_norm: Some(10.0),
            seed: 0,
        }
    }
}

impl SupervisedHyper {
    pub fn with_budget(&self, budget: f64) -> Self {
        SupervisedHyper {
            iterations: scale_count(self.iterations, budget),
            ..self.clone()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }
}

fn scale_count(n: usize, budget: f64) -> usize {
    if n == 0 {
        0
    } else {
        ((n as f64 * budget).round() as usize).max(1)
    }
}

/// Losses kept for divergence reports.
#[derive(Debug, Default, Clone)]
pub(crate) struct LossTrace {
    recent: std::collections::VecDeque<f64>,
    window_sum: f64,
    window_n: usize,
}

impl LossTrace {
    const KEEP: usize = 20;

    pub fn push(&mut self, loss: f64) {
        if self.recent.len() == Self::KEEP {
            self.recent.pop_front();
        }
        self.recent.push_back(loss);
        self.window_sum += loss;
        self.window_n += 1;
    }

    pub fn recent(&self) -> Vec<f64> {
        self.recent.iter().copied().collect()
    }

    /// Mean since the previous call.
    pub fn take_window_mean(&mut self) -> f64 {
        let m = if self.window_n == 0 {
            f64::NAN
        } else {
            self.window_sum / self.window_n as f64
        };
        self.window_sum = 0.0;
        self.window_n = 0;
        m
    }
}
