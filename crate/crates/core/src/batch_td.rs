//! Off-policy temporal-difference training over a logged dataset with
//! counterfactual next histories. Shared by feature-expectation learning
//! (vector targets, policy-weighted bootstrap) and candidate-policy
//! Q-learning (scalar targets, max bootstrap).
//!
//! The network head emits `k` values per action, laid out `[a=0 | a=1]`.
//! Histories are drawn by sampling logged trajectories uniformly and using
//! every prefix of each, until a minibatch holds at least `batch_size`
//! prefixes.

use rand::Rng;
use rayon::prelude::*;

use crate::cfmodel::FeatureTable;
use crate::cohort::BatchDataset;
use crate::error::{CirlError, Result};
use crate::history::{Encoder, INPUT_DIM};
use crate::policy::{greedy_action, PrefixProbs};
use crate::rng::stream;
use crate::seqnet::{self, copy_params, init_network, Gradients, NetworkParams, OptimizerState, Runner};
use crate::train::{LossTrace, TdHyper};

/// How the value of a counterfactual next history is formed from the
/// target network's outputs there.
pub(crate) enum Bootstrap<'a> {
    /// `sum_a' pi(a'|h') V(h', a')`, with the policy tabulated per prefix.
    Policy(&'a [Vec<PrefixProbs>]),
    /// `max_a' Q(h', a')` (scalar values only).
    Max,
}

pub(crate) struct TdProblem<'a> {
    pub dataset: &'a BatchDataset,
    pub features: &'a FeatureTable,
    pub encoder: Encoder,
    pub gamma: f64,
    /// Values per action.
    pub k: usize,
    /// Immediate reward `r(h_t, a)` per trajectory, flat `[t][a][k]`.
    pub rewards: Vec<Vec<f64>>,
    pub bootstrap: Bootstrap<'a>,
    pub stage: &'static str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdLogRow {
    pub iteration: usize,
    pub epsilon: f64,
    pub td_loss: f64,
    pub estimate: Vec<f64>,
}

pub(crate) struct TdOutcome {
    pub net: NetworkParams,
    pub target: NetworkParams,
    pub log: Vec<TdLogRow>,
}

impl<'a> TdProblem<'a> {
    fn value_of(&self, i: usize, t: usize, a: usize, y: &[f64], out: &mut [f64]) {
        let k = self.k;
        match &self.bootstrap {
            Bootstrap::Policy(table) => {
                let p1 = table[i][t].next[a];
                for j in 0..k {
                    out[j] = (1.0 - p1) * y[j] + p1 * y[k + j];
                }
            }
            Bootstrap::Max => out[0] = y[0].max(y[1]),
        }
    }

    /// Regression targets for every `(i, t, a)` under the given target network.
    fn targets(&self, target: &NetworkParams) -> Vec<Vec<f64>> {
        let k = self.k;
        self.dataset
            .trajectories
            .par_iter()
            .enumerate()
            .map(|(i, tr)| {
                let row = &self.features.rows[i];
                let t_len = tr.len();
                let mut out = self.rewards[i].clone();
                let mut runner = Runner::new(target);
                let mut v = vec![0.0; k];
                for t in 0..t_len {
                    let prev = if t == 0 { 0 } else { tr.actions()[t - 1] };
                    runner.step(target, &self.encoder.step(tr.covariates()[t], prev, t));
                    for a in 0..2 {
                        if row.terminal[t][a] {
                            continue;
                        }
                        let mut branch = runner.clone();
                        branch.step(target, &self.encoder.step(row.branches[t][a], a as u8, t + 1));
                        let y = branch.output(target);
                        self.value_of(i, t, a, &y, &mut v);
                        let base = (t * 2 + a) * k;
                        for j in 0..k {
                            out[base + j] += self.gamma * v[j];
                        }
                    }
                }
                out
            })
            .collect()
    }

    /// Behaviour action at prefix `t` of trajectory `i`: uniform with
    /// probability `eps`, otherwise from the evaluated policy (or greedy on
    /// the online network's own outputs).
    fn behaviour(&self, i: usize, t: usize, online: &[f64], eps: f64, rng: &mut impl Rng) -> usize {
        if rng.random_bool(eps) {
            return rng.random_range(0..2);
        }
        match &self.bootstrap {
            Bootstrap::Policy(table) => {
                let p1 = table[i][t].here;
                usize::from(p1 >= 1.0 || (p1 > 0.0 && rng.random_bool(p1)))
            }
            Bootstrap::Max => greedy_action([online[0], online[1]]) as usize,
        }
    }

    pub fn solve(&self, hyper: &TdHyper, closing: &(dyn Fn(&NetworkParams) -> Vec<f64> + Sync)) -> Result<TdOutcome> {
        hyper.validate()?;
        let k = self.k;
        let mut net = init_network(hyper.seed, INPUT_DIM, hyper.hidden_dim, 2 * k)?;
        let mut target = copy_params(&net);
        let mut opt = OptimizerState::new(net.dims(), hyper.adam())?;
        let mut rng = stream(hyper.seed, 0x7d);
        let mut grads = Gradients::zeros(net.dims());
        let mut trace = LossTrace::default();
        let mut log = Vec::new();
        let mut targets = self.targets(&target);
        let n = self.dataset.len();
        let mut seqs: Vec<Option<Vec<f64>>> = vec![None; n];

        for iter in 1..=hyper.iterations {
            let eps = hyper.epsilon(iter);
            grads.clear();
            let mut picked = Vec::new();
            let mut count = 0;
            while count < hyper.batch_size {
                let i = rng.random_range(0..n);
                count += self.dataset.trajectories[i].len();
                picked.push(i);
            }
            let mut loss = 0.0;
            for &i in &picked {
                let tr = &self.dataset.trajectories[i];
                let seq =
                    seqs[i].get_or_insert_with(|| self.encoder.encode(&tr.covariates()[..tr.len()], tr.actions()));
                let (out, cache) = seqnet::forward(&net, seq)?;
                let mut dy = vec![0.0; out.len()];
                for t in 0..tr.len() {
                    let row = &out[t * 2 * k..(t + 1) * 2 * k];
                    let a = self.behaviour(i, t, row, eps, &mut rng);
                    let base = (t * 2 + a) * k;
                    for j in 0..k {
                        let e = out[base + j] - targets[i][base + j];
                        loss += e * e;
                        dy[base + j] = 2.0 * e / count as f64;
                    }
                }
                seqnet::backward_into(&net, &cache, &dy, &mut grads)?;
            }
            let loss = loss / count as f64;
            trace.push(loss);
            if !loss.is_finite() {
                return Err(CirlError::Divergence {
                    stage: self.stage,
                    iteration: iter,
                    recent: trace.recent(),
                });
            }
            opt.step(&mut net, &grads)?;
            if iter % hyper.target_sync == 0 {
                target.sync_from(&net);
                targets = self.targets(&target);
            }
            if iter % hyper.log_every == 0 || iter == hyper.iterations {
                log.push(TdLogRow {
                    iteration: iter,
                    epsilon: eps,
                    td_loss: trace.take_window_mean(),
                    estimate: closing(&net),
                });
            }
        }
        Ok(TdOutcome { net, target, log })
    }
}

/// Outputs of `net` at each initial history `h_0` of the dataset.
pub(crate) fn initial_outputs(net: &NetworkParams, dataset: &BatchDataset, encoder: &Encoder) -> Vec<Vec<f64>> {
    dataset
        .trajectories
        .iter()
        .map(|tr| {
            let mut r = Runner::new(net);
            r.step(net, &encoder.step(tr.covariates()[0], 0, 0));
            r.output(net)
        })
        .collect()
}
