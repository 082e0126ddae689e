//! History-conditioned treatment policies over the binary action space.

use rand::Rng;

use crate::error::{CirlError, Result};
use crate::history::{Encoder, History, INPUT_DIM};
use crate::rng::SimRng;
use crate::seqnet::{self, NetworkParams, Runner};

/// Action probabilities at one history prefix and at its two one-step
/// counterfactual continuations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefixProbs {
    /// `pi(1 | h_t)`.
    pub here: f64,
    /// `pi(1 | (h_t, a, next_a))` for `a = 0, 1`.
    pub next: [f64; 2],
}

pub trait Policy: Sync {
    /// Probability of treating, `pi(1 | h)`.
    fn prob_treat(&self, history: &History) -> f64;

    /// Probabilities for every prefix `h_t`, `t < branches.len()`, of a full
    /// history, and for the continuations `(h_t, a, branches[t][a])`.
    fn prefix_table(&self, history: &History, branches: &[[[f64; 2]; 2]]) -> Vec<PrefixProbs> {
        branches
            .iter()
            .enumerate()
            .map(|(t, br)| {
                let h = history.prefix(t);
                PrefixProbs {
                    here: self.prob_treat(&h),
                    next: [
                        self.prob_treat(&h.extended(0, br[0])),
                        self.prob_treat(&h.extended(1, br[1])),
                    ],
                }
            })
            .collect()
    }

    /// `pi(1 | h_t)` for every prefix `t < steps`.
    fn prefix_probs(&self, history: &History, steps: usize) -> Vec<f64> {
        (0..steps).map(|t| self.prob_treat(&history.prefix(t))).collect()
    }

    fn act(&self, history: &History, rng: &mut SimRng) -> u8 {
        sample_action(self.prob_treat(history), rng)
    }
}

pub fn sample_action(prob_treat: f64, rng: &mut SimRng) -> u8 {
    if prob_treat >= 1.0 {
        1
    } else if prob_treat <= 0.0 {
        0
    } else {
        u8::from(rng.random_bool(prob_treat))
    }
}

/// Always treat with a fixed probability.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPolicy(pub f64);

impl ConstantPolicy {
    pub const ALWAYS: ConstantPolicy = ConstantPolicy(1.0);
    pub const NEVER: ConstantPolicy = ConstantPolicy(0.0);
    pub const UNIFORM: ConstantPolicy = ConstantPolicy(0.5);
}

impl Policy for ConstantPolicy {
    fn prob_treat(&self, _history: &History) -> f64 {
        self.0
    }

    fn prefix_probs(&self, _history: &History, steps: usize) -> Vec<f64> {
        vec![self.0; steps]
    }

    fn prefix_table(&self, _history: &History, branches: &[[[f64; 2]; 2]]) -> Vec<PrefixProbs> {
        vec![
            PrefixProbs {
                here: self.0,
                next: [self.0; 2],
            };
            branches.len()
        ]
    }
}

/// Recurrent action-value network: the head emits `Q(h, 0), Q(h, 1)`.
#[derive(Debug, Clone)]
pub struct QNetwork {
    pub params: NetworkParams,
    pub encoder: Encoder,
}

impl QNetwork {
    pub fn new(params: NetworkParams, encoder: Encoder) -> Self {
        debug_assert_eq!(params.dims().input, INPUT_DIM);
        debug_assert_eq!(params.dims().output, 2);
        QNetwork { params, encoder }
    }

    pub fn q_values(&self, history: &History) -> [f64; 2] {
        let y = seqnet::eval_last(&self.params, &self.encoder.encode_history(history))
            .expect("encoded history matches network input");
        [y[0], y[1]]
    }

    /// Q-values at every prefix `h_t`, `t < branches.len()`, and at the
    /// continuations `(h_t, a, branches[t][a])`, in a single recurrent pass.
    pub fn q_table(&self, history: &History, branches: &[[[f64; 2]; 2]]) -> (Vec<[f64; 2]>, Vec<[[f64; 2]; 2]>) {
        let p = &self.params;
        let mut runner = Runner::new(p);
        let mut here = Vec::with_capacity(branches.len());
        let mut next = Vec::with_capacity(branches.len());
        for (t, br) in branches.iter().enumerate() {
            let prev = if t == 0 { 0 } else { history.actions[t - 1] };
            runner.step(p, &self.encoder.step(history.covariates[t], prev, t));
            let y = runner.output(p);
            here.push([y[0], y[1]]);
            let mut cont = [[0.0; 2]; 2];
            for a in 0..2u8 {
                let mut branch = runner.clone();
                branch.step(p, &self.encoder.step(br[a as usize], a, t + 1));
                let y = branch.output(p);
                cont[a as usize] = [y[0], y[1]];
            }
            next.push(cont);
        }
        (here, next)
    }

    /// Q-values at every prefix `t < steps` in one recurrent pass.
    pub fn prefix_q(&self, history: &History, steps: usize) -> Vec<[f64; 2]> {
        let seq = self.encoder.encode(&history.covariates[..steps], &history.actions);
        let (out, _) = seqnet::forward(&self.params, &seq).expect("encoded history matches network input");
        out.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
    }

    pub fn greedy(&self, history: &History) -> u8 {
        greedy_action(self.q_values(history))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        seqnet::save_params(&self.params, path)
    }

    pub fn load(path: &std::path::Path, config: &crate::oncosim::SimConfig) -> Result<Self> {
        let params = seqnet::load_params(path)?;
        let d = params.dims();
        if d.input != INPUT_DIM || d.output != 2 {
            return Err(CirlError::parse(
                path.display().to_string(),
                1,
                format!(
                    "expected a {INPUT_DIM}-input 2-output network, got {}x{}",
                    d.input, d.output
                ),
            ));
        }
        Ok(QNetwork::new(params, Encoder::new(config)))
    }
}

/// Argmax with ties resolved to action 0.
#[inline]
pub fn greedy_action(q: [f64; 2]) -> u8 {
    u8::from(q[1] > q[0])
}

/// Greedy policy of a Q-network.
impl Policy for QNetwork {
    fn prob_treat(&self, history: &History) -> f64 {
        f64::from(self.greedy(history))
    }

    fn prefix_probs(&self, history: &History, steps: usize) -> Vec<f64> {
        self.prefix_q(history, steps)
            .into_iter()
            .map(|q| f64::from(greedy_action(q)))
            .collect()
    }

    fn prefix_table(&self, history: &History, branches: &[[[f64; 2]; 2]]) -> Vec<PrefixProbs> {
        let (here, next) = self.q_table(history, branches);
        here.iter()
            .zip(&next)
            .map(|(q, n)| PrefixProbs {
                here: f64::from(greedy_action(*q)),
                next: [f64::from(greedy_action(n[0])), f64::from(greedy_action(n[1]))],
            })
            .collect()
    }
}
