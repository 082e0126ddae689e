//! The demonstrating expert: a recurrent Q-network trained online against the
//! true reward, and the stochastic logging policy built on top of it.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{CirlError, Result};
use crate::history::{Encoder, History, INPUT_DIM};
use crate::oncosim::{self, RewardWeights, SimConfig};
use crate::policy::{greedy_action, Policy, PrefixProbs, QNetwork};
use crate::rng::{stream, SimRng};
use crate::seqnet::{self, copy_params, init_network, Gradients, NetworkParams, OptimizerState};
use crate::train::{LossTrace, TdHyper};

/// Stochastic logging policy `pi(1|h) = sigmoid(kappa * (Q(h,1) - Q(h,0)))`.
#[derive(Debug, Clone)]
pub struct ExpertPolicy {
    pub q: QNetwork,
    pub kappa: f64,
}

pub const ACTION_COUNT: usize = 2;

/// Build the logging policy for confounding strength `kappa >= 0`
/// (`f64::INFINITY` gives the greedy policy).
pub fn logging_policy(q_net: QNetwork, kappa: f64) -> Result<ExpertPolicy> {
    if !(kappa >= 0.0) {
        return Err(CirlError::invalid(format!("kappa must be >= 0, got {kappa}")));
    }
    Ok(ExpertPolicy { q: q_net, kappa })
}

fn treat_probability(kappa: f64, q: [f64; 2]) -> f64 {
    let diff = q[1] - q[0];
    if kappa.is_infinite() {
        return f64::from(greedy_action(q));
    }
    1.0 / (1.0 + (-kappa * diff).exp())
}

impl ExpertPolicy {
    /// `[pi(0|h), pi(1|h)]`.
    pub fn action_probs(&self, history: &History) -> [f64; 2] {
        let p1 = self.prob_treat(history);
        [1.0 - p1, p1]
    }

    /// SHA-256 over the Q-network parameters and kappa, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let d = self.q.params.dims();
        for v in [d.input, d.hidden, d.output] {
            h.update((v as u64).to_le_bytes());
        }
        for v in self.q.params.as_slice() {
            h.update(v.to_le_bytes());
        }
        h.update(self.kappa.to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Policy for ExpertPolicy {
    fn prob_treat(&self, history: &History) -> f64 {
        treat_probability(self.kappa, self.q.q_values(history))
    }

    fn prefix_probs(&self, history: &History, steps: usize) -> Vec<f64> {
        self.q
            .prefix_q(history, steps)
            .into_iter()
            .map(|q| treat_probability(self.kappa, q))
            .collect()
    }

    fn prefix_table(&self, history: &History, branches: &[[[f64; 2]; 2]]) -> Vec<PrefixProbs> {
        let (here, next) = self.q.q_table(history, branches);
        here.iter()
            .zip(&next)
            .map(|(q, n)| PrefixProbs {
                here: treat_probability(self.kappa, *q),
                next: [treat_probability(self.kappa, n[0]), treat_probability(self.kappa, n[1])],
            })
            .collect()
    }
}

/// Sample an action from the logging policy.
pub fn expert_action(policy: &ExpertPolicy, history: &History, rng: &mut SimRng) -> u8 {
    policy.act(history, rng)
}

/// A completed episode; transitions in the replay memory point into it.
#[derive(Debug)]
struct Episode {
    history: History,
    rewards: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Transition {
    episode: Arc<Episode>,
    t: usize,
}

impl Transition {
    fn terminal(&self) -> bool {
        self.t + 1 == self.episode.rewards.len()
    }
}

/// FIFO experience replay memory of bounded capacity.
#[derive(Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(CirlError::invalid("replay capacity must be >= 1"));
        }
        Ok(ReplayBuffer {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn push_episode(&mut self, episode: Episode) {
        let ep = Arc::new(episode);
        for t in 0..ep.rewards.len() {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(Transition {
                episode: Arc::clone(&ep),
                t,
            });
        }
    }

    /// `(t, action, reward, terminal)` of the oldest retained transition.
    pub fn oldest(&self) -> Option<(usize, u8, f64, bool)> {
        self.entries.front().map(|tr| {
            (
                tr.t,
                tr.episode.history.actions[tr.t],
                tr.episode.rewards[tr.t],
                tr.terminal(),
            )
        })
    }
}

#[derive(Debug, Clone)]
pub struct ExpertHyper {
    pub td: TdHyper,
    pub replay_capacity: usize,
}

impl Default for ExpertHyper {
    fn default() -> Self {
        ExpertHyper {
            td: TdHyper::expert_defaults(),
            replay_capacity: 10_000,
        }
    }
}

/// One row of the expert training curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    pub epsilon: f64,
    pub td_loss: f64,
    /// Mean discounted return of episodes completed in the window.
    pub episode_return: f64,
    pub episodes: usize,
}

#[derive(Debug)]
pub struct ExpertTraining {
    pub q_net: NetworkParams,
    pub curve: Vec<CurvePoint>,
}

/// Q-learning target `r` for terminal transitions, `r + gamma * max_a' Q_target(h', a')` otherwise.
pub fn td_target(reward: f64, gamma: f64, terminal: bool, next_q: Option<[f64; 2]>) -> f64 {
    if terminal {
        reward
    } else {
        let q = next_q.expect("non-terminal transition needs bootstrap values");
        reward + gamma * q[0].max(q[1])
    }
}

/// Deep recurrent Q-learning with epsilon-greedy exploration, experience
/// replay and a target network synced every `target_sync` iterations.
pub fn train_expert(config: &SimConfig, weights: &RewardWeights, hyper: &ExpertHyper) -> Result<ExpertTraining> {
    config.validate()?;
    hyper.td.validate()?;
    if weights.l1() > 1.0 + 1e-12 {
        return Err(CirlError::invalid("expert reward weights must satisfy |w|_1 <= 1"));
    }
    let td = &hyper.td;
    let encoder = Encoder::new(config);
    let mut q = init_network(td.seed, INPUT_DIM, td.hidden_dim, 2)?;
    let mut target = copy_params(&q);
    let mut opt = OptimizerState::new(q.dims(), td.adam())?;
    let mut replay = ReplayBuffer::new(hyper.replay_capacity)?;
    let mut env_rng = stream(td.seed, 1);
    let mut sample_rng = stream(td.seed, 2);

    let mut state = oncosim::reset(config, &mut env_rng);
    let mut history = History::initial(state.x(), state.z());
    let mut rewards = Vec::new();

    let mut trace = LossTrace::default();
    let mut curve = Vec::new();
    let mut window_returns = (0.0, 0usize);
    let mut grads = Gradients::zeros(q.dims());

    for iter in 1..=td.iterations {
        let eps = td.epsilon(iter);
        // act in the environment
        let action = if env_rng.random_bool(eps) {
            oncosim::random_action(&mut env_rng)
        } else {
            let y = seqnet::eval_last(&q, &encoder.encode_history(&history))?;
            greedy_action([y[0], y[1]])
        };
        let (next, x, z) = oncosim::step(config, &state, action, &mut env_rng)?;
        rewards.push(oncosim::reward_of(config, &weights.w, x, z));
        history.push(action, [x, z]);
        state = next;
        if state.terminated() {
            let ret: f64 = rewards
                .iter()
                .enumerate()
                .map(|(t, r)| weights.gamma.powi(t as i32) * r)
                .sum();
            window_returns.0 += ret;
            window_returns.1 += 1;
            replay.push_episode(Episode {
                history: std::mem::replace(&mut history, History::initial(0.0, 0.0)),
                rewards: std::mem::take(&mut rewards),
            });
            state = oncosim::reset(config, &mut env_rng);
            history = History::initial(state.x(), state.z());
        }

        if replay.len() >= td.batch_size.min(replay.capacity()) {
            grads.clear();
            let mut loss = 0.0;
            let b = td.batch_size;
            for _ in 0..b {
                let tr = &replay.entries[sample_rng.random_range(0..replay.len())];
                let ep = &tr.episode;
                let a = ep.history.actions[tr.t] as usize;
                let next_q = if tr.terminal() {
                    None
                } else {
                    let y = seqnet::eval_last(&target, &encoder.encode_prefix(&ep.history, tr.t + 1))?;
                    Some([y[0], y[1]])
                };
                let y_target = td_target(ep.rewards[tr.t], weights.gamma, tr.terminal(), next_q);
                let seq = encoder.encode_prefix(&ep.history, tr.t);
                let (out, cache) = seqnet::forward(&q, &seq)?;
                let last = out.len() - 2;
                let err = out[last + a] - y_target;
                loss += err * err;
                let mut dy = vec![0.0; out.len()];
                dy[last + a] = 2.0 * err / b as f64;
                seqnet::backward_into(&q, &cache, &dy, &mut grads)?;
            }
            let loss = loss / b as f64;
            trace.push(loss);
            if !loss.is_finite() {
                return Err(CirlError::Divergence {
                    stage: "expert Q-learning",
                    iteration: iter,
                    recent: trace.recent(),
                });
            }
            opt.step(&mut q, &grads)?;
        }
        if iter % td.target_sync == 0 {
            target.sync_from(&q);
        }
        if iter % td.log_every == 0 || iter == td.iterations {
            curve.push(CurvePoint {
                iteration: iter,
                epsilon: eps,
                td_loss: trace.take_window_mean(),
                episode_return: if window_returns.1 > 0 {
                    window_returns.0 / window_returns.1 as f64
                } else {
                    f64::NAN
                },
                episodes: window_returns.1,
            });
            window_returns = (0.0, 0);
        }
    }
    Ok(ExpertTraining { q_net: q, curve })
}
