//! Candidate-policy optimization: recurrent Q-learning on the batch data for
//! the linear reward `R(h, a) = w . phi(h, a)`, returning the greedy policy.

use std::path::Path;

use crate::batch_td::{initial_outputs, Bootstrap, TdProblem};
use crate::cfmodel::FeatureMap;
use crate::cohort::BatchDataset;
use crate::error::{CirlError, Result};
use crate::history::History;
use crate::mulearn::{BatchContext, TdLogRow};
use crate::oncosim::RewardWeights;
use crate::policy::{Policy, PrefixProbs, QNetwork};
use crate::seqnet::NetworkParams;
use crate::train::TdHyper;

/// Deterministic greedy policy of a Q-network trained for `reward_weights_used`.
#[derive(Debug, Clone)]
pub struct CandidatePolicy {
    pub q: QNetwork,
    pub reward_weights_used: RewardWeights,
    pub log: Vec<TdLogRow>,
}

impl CandidatePolicy {
    pub fn action(&self, history: &History) -> u8 {
        self.q.greedy(history)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.q.save(path)
    }
}

impl Policy for CandidatePolicy {
    fn prob_treat(&self, history: &History) -> f64 {
        self.q.prob_treat(history)
    }

    fn prefix_probs(&self, history: &History, steps: usize) -> Vec<f64> {
        self.q.prefix_probs(history, steps)
    }

    fn prefix_table(&self, history: &History, branches: &[[[f64; 2]; 2]]) -> Vec<PrefixProbs> {
        self.q.prefix_table(history, branches)
    }
}

pub fn optimize_policy(
    weights: &[f64],
    dataset: &BatchDataset,
    fmap: &FeatureMap,
    gamma: f64,
    hyper: &TdHyper,
) -> Result<CandidatePolicy> {
    optimize_policy_in(weights, &BatchContext::new(dataset, fmap)?, gamma, hyper)
}

pub fn optimize_policy_in(
    weights: &[f64],
    ctx: &BatchContext<'_>,
    gamma: f64,
    hyper: &TdHyper,
) -> Result<CandidatePolicy> {
    let used = RewardWeights::unnormalized(weights.to_vec(), gamma)?;
    if weights.len() != crate::cfmodel::FEATURE_DIM {
        return Err(CirlError::invalid(format!(
            "reward weights have dimension {}, features have {}",
            weights.len(),
            crate::cfmodel::FEATURE_DIM
        )));
    }
    let rewards = ctx
        .features
        .rows
        .iter()
        .map(|row| {
            row.phi
                .iter()
                .flat_map(|p| p.iter().map(|f| weights[0] * f[0] + weights[1] * f[1]))
                .collect()
        })
        .collect();
    let problem = TdProblem {
        dataset: ctx.dataset,
        features: &ctx.features,
        encoder: ctx.encoder,
        gamma,
        k: 1,
        rewards,
        bootstrap: Bootstrap::Max,
        stage: "policy optimization",
    };
    let closing = |net: &NetworkParams| {
        let v: f64 = initial_outputs(net, ctx.dataset, &ctx.encoder)
            .iter()
            .map(|y| y[0].max(y[1]))
            .sum();
        vec![v / ctx.dataset.len() as f64]
    };
    let out = problem.solve(hyper, &closing)?;
    Ok(CandidatePolicy {
        q: QNetwork::new(out.net, ctx.encoder),
        reward_weights_used: used,
        log: out.log,
    })
}
