//! Patient histories `h_t = (x_{0:t}, z_{0:t}, a_{0:t-1})` and their encoding as
//! network input sequences.

use crate::oncosim::{SimConfig, TerminationReason};

/// Width of one encoded history step.
pub const INPUT_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct History {
    /// `(x_k, z_k)` for `k = 0..=t`.
    pub covariates: Vec<[f64; 2]>,
    /// `a_k` for `k = 0..t`.
    pub actions: Vec<u8>,
}

impl History {
    pub fn initial(x0: f64, z0: f64) -> Self {
        History {
            covariates: vec![[x0, z0]],
            actions: Vec::new(),
        }
    }

    /// Current timestep `t` (number of actions taken so far).
    pub fn t(&self) -> usize {
        self.actions.len()
    }

    pub fn last(&self) -> [f64; 2] {
        *self.covariates.last().expect("history holds at least x_0")
    }

    pub fn push(&mut self, action: u8, next: [f64; 2]) {
        self.actions.push(action);
        self.covariates.push(next);
    }

    /// `(h, a, next)`.
    pub fn extended(&self, action: u8, next: [f64; 2]) -> History {
        let mut h = self.clone();
        h.push(action, next);
        h
    }

    /// The prefix `h_t`.
    pub fn prefix(&self, t: usize) -> History {
        History {
            covariates: self.covariates[..=t].to_vec(),
            actions: self.actions[..t].to_vec(),
        }
    }

    pub fn termination(&self, config: &SimConfig) -> Option<TerminationReason> {
        let [x, z] = self.last();
        config.termination(x, z, self.t())
    }

    pub fn is_terminal(&self, config: &SimConfig) -> bool {
        self.termination(config).is_some()
    }
}

/// Maps histories to network inputs. Step `k` is encoded as
/// `[x_k / x_max, z_k / z_max, a_{k-1}, k / max_horizon]` with `a_{-1} = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Encoder {
    pub x_scale: f64,
    pub z_scale: f64,
    pub horizon: f64,
}

impl Encoder {
    pub fn new(config: &SimConfig) -> Self {
        Encoder {
            x_scale: config.x_max,
            z_scale: config.z_max,
            horizon: config.max_horizon as f64,
        }
    }

    #[inline]
    pub fn step(&self, cov: [f64; 2], prev_action: u8, k: usize) -> [f64; INPUT_DIM] {
        [
            cov[0] / self.x_scale,
            cov[1] / self.z_scale,
            f64::from(prev_action),
            k as f64 / self.horizon,
        ]
    }

    /// Encoding of the current observation only (no action or time context).
    #[inline]
    pub fn memoryless(&self, cov: [f64; 2]) -> [f64; INPUT_DIM] {
        [cov[0] / self.x_scale, cov[1] / self.z_scale, 0.0, 0.0]
    }

    /// Flat sequence for the prefix of length `covariates.len()`;
    /// `actions` must hold at least `covariates.len() - 1` entries.
    pub fn encode(&self, covariates: &[[f64; 2]], actions: &[u8]) -> Vec<f64> {
        let mut out = Vec::with_capacity((covariates.len() + 1) * INPUT_DIM);
        for (k, &cov) in covariates.iter().enumerate() {
            let prev = if k == 0 { 0 } else { actions[k - 1] };
            out.extend_from_slice(&self.step(cov, prev, k));
        }
        out
    }

    pub fn encode_history(&self, h: &History) -> Vec<f64> {
        self.encode(&h.covariates, &h.actions)
    }

    /// Encoded prefix `h_t` of a full history.
    pub fn encode_prefix(&self, h: &History, t: usize) -> Vec<f64> {
        self.encode(&h.covariates[..=t], &h.actions[..t])
    }
}
