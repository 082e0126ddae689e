//! Feature expectations: the empirical expert estimate and off-policy
//! estimation for arbitrary policies by temporal-difference learning over
//! counterfactual next histories (mu-learning).

use std::io::Write;

pub use crate::batch_td::TdLogRow;
use crate::batch_td::{initial_outputs, Bootstrap, TdProblem};
use crate::cfmodel::{FeatureMap, FeatureTable, FEATURE_DIM};
use crate::cohort::BatchDataset;
use crate::error::{CirlError, Result};
use crate::history::{Encoder, History};
use crate::oncosim::fmt_real;
use crate::policy::{Policy, PrefixProbs};
use crate::seqnet::{NetworkParams, Runner};
use crate::train::TdHyper;

/// Discounted feature expectation `mu = E[sum_t gamma^t phi(h_t, a_t)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExpectation {
    pub mu: Vec<f64>,
}

impl FeatureExpectation {
    pub fn new(mu: Vec<f64>) -> Self {
        FeatureExpectation { mu }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn norm(&self) -> f64 {
        self.mu.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &FeatureExpectation) -> f64 {
        self.mu
            .iter()
            .zip(&other.mu)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// A dataset with its counterfactual feature table; built once and shared
/// by every estimate inside the outer loop.
pub struct BatchContext<'a> {
    pub dataset: &'a BatchDataset,
    pub fmap: &'a FeatureMap,
    pub features: FeatureTable,
    pub encoder: Encoder,
}

impl<'a> BatchContext<'a> {
    pub fn new(dataset: &'a BatchDataset, fmap: &'a FeatureMap) -> Result<Self> {
        if dataset.is_empty() {
            return Err(CirlError::invalid("empty dataset"));
        }
        Ok(BatchContext {
            dataset,
            fmap,
            features: FeatureTable::build(dataset, fmap),
            encoder: Encoder::new(fmap.config()),
        })
    }

    /// `pi` at every logged prefix and its counterfactual continuations.
    pub fn policy_table(&self, policy: &dyn Policy) -> Vec<Vec<PrefixProbs>> {
        use rayon::prelude::*;
        self.dataset
            .trajectories
            .par_iter()
            .zip(&self.features.rows)
            .map(|(tr, row)| policy.prefix_table(&tr.history, &row.branches))
            .collect()
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(CirlError::invalid(format!("gamma must lie in [0, 1), got {gamma}")))
    }
}

/// Empirical expert feature expectation over the logged actions:
/// `(1/N) sum_i sum_t gamma^t phi(h_t^i, a_t^i)`.
pub fn expert_feature_expectations(
    dataset: &BatchDataset,
    fmap: &FeatureMap,
    gamma: f64,
) -> Result<FeatureExpectation> {
    expert_feature_expectations_in(&BatchContext::new(dataset, fmap)?, gamma)
}

pub fn expert_feature_expectations_in(ctx: &BatchContext<'_>, gamma: f64) -> Result<FeatureExpectation> {
    check_gamma(gamma)?;
    let mut mu = vec![0.0; FEATURE_DIM];
    for (tr, row) in ctx.dataset.trajectories.iter().zip(&ctx.features.rows) {
        let mut g = 1.0;
        for (t, &a) in tr.actions().iter().enumerate() {
            for (m, f) in mu.iter_mut().zip(row.phi[t][a as usize]) {
                *m += g * f;
            }
            g *= gamma;
        }
    }
    let n = ctx.dataset.len() as f64;
    mu.iter_mut().for_each(|m| *m /= n);
    Ok(FeatureExpectation { mu })
}

/// Learned history-action feature expectations `mu(h, a)`.
#[derive(Debug, Clone)]
pub struct MuNetwork {
    pub net: NetworkParams,
    pub target_net: NetworkParams,
    pub sync_period: usize,
    pub encoder: Encoder,
}

impl MuNetwork {
    pub fn dim(&self) -> usize {
        self.net.dims().output / 2
    }

    /// `[mu(h, 0), mu(h, 1)]`.
    pub fn values(&self, history: &History) -> [Vec<f64>; 2] {
        let mut r = Runner::new(&self.net);
        for (k, &c) in history.covariates.iter().enumerate() {
            let prev = if k == 0 { 0 } else { history.actions[k - 1] };
            r.step(&self.net, &self.encoder.step(c, prev, k));
        }
        let y = r.output(&self.net);
        let d = self.dim();
        [y[..d].to_vec(), y[d..].to_vec()]
    }
}

#[derive(Debug, Clone)]
pub struct MuEstimate {
    pub mu: FeatureExpectation,
    pub network: MuNetwork,
    pub log: Vec<TdLogRow>,
}

/// Closing estimator `(1/N) sum_i sum_a pi(a|h_0^i) mu(h_0^i, a)`.
fn closing_estimate(net: &NetworkParams, ctx: &BatchContext<'_>, table: &[Vec<PrefixProbs>]) -> Vec<f64> {
    let d = net.dims().output / 2;
    let mut mu = vec![0.0; d];
    for (y, row) in initial_outputs(net, ctx.dataset, &ctx.encoder).iter().zip(table) {
        let p1 = row[0].here;
        for j in 0..d {
            mu[j] += (1.0 - p1) * y[j] + p1 * y[d + j];
        }
    }
    let n = ctx.dataset.len() as f64;
    mu.iter_mut().for_each(|m| *m /= n);
    mu
}

/// Estimate `mu^pi` for `policy` from the batch data.
pub fn estimate_mu(
    policy: &dyn Policy,
    dataset: &BatchDataset,
    fmap: &FeatureMap,
    gamma: f64,
    hyper: &TdHyper,
) -> Result<MuEstimate> {
    estimate_mu_in(policy, &BatchContext::new(dataset, fmap)?, gamma, hyper)
}

pub fn estimate_mu_in(policy: &dyn Policy, ctx: &BatchContext<'_>, gamma: f64, hyper: &TdHyper) -> Result<MuEstimate> {
    check_gamma(gamma)?;
    let table = ctx.policy_table(policy);
    let rewards = ctx
        .features
        .rows
        .iter()
        .map(|row| row.phi.iter().flat_map(|p| p.iter().flatten().copied()).collect())
        .collect();
    let problem = TdProblem {
        dataset: ctx.dataset,
        features: &ctx.features,
        encoder: ctx.encoder,
        gamma,
        k: FEATURE_DIM,
        rewards,
        bootstrap: Bootstrap::Policy(&table),
        stage: "mu-learning",
    };
    let closing = |net: &NetworkParams| closing_estimate(net, ctx, &table);
    let out = problem.solve(hyper, &closing)?;
    let mu = FeatureExpectation::new(closing(&out.net));
    Ok(MuEstimate {
        mu,
        network: MuNetwork {
            net: out.net,
            target_net: out.target,
            sync_period: hyper.target_sync,
            encoder: ctx.encoder,
        },
        log: out.log,
    })
}

/// Convergence log as CSV: `iteration,epsilon,td_loss,mu_1,...,mu_d`.
pub fn write_convergence_csv<W: Write>(log: &[TdLogRow], mut out: W) -> Result<()> {
    let d = log.first().map_or(0, |r| r.estimate.len());
    write!(out, "iteration,epsilon,td_loss")?;
    for j in 1..=d {
        write!(out, ",mu_{j}")?;
    }
    writeln!(out)?;
    for r in log {
        write!(out, "{},{},{}", r.iteration, fmt_real(r.epsilon), fmt_real(r.td_loss))?;
        for v in &r.estimate {
            write!(out, ",{}", fmt_real(*v))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::generate_with;
    use crate::oncosim::SimConfig;
    use crate::policy::ConstantPolicy;

    fn ctx_data(n: usize) -> (BatchDataset, FeatureMap) {
        let c = SimConfig::default();
        (
            generate_with(&ConstantPolicy::UNIFORM, "u", &c, n, 2).unwrap(),
            FeatureMap::simulator(&c),
        )
    }

    #[test]
    fn expert_mu_single_step_and_duplicates() {
        let (mut d, fmap) = ctx_data(1);
        d.trajectories[0].history = d.trajectories[0].history.prefix(1);
        let mu = expert_feature_expectations(&d, &fmap, 0.9).unwrap();
        let h0 = d.trajectories[0].history.prefix(0);
        let phi = fmap.phi(&h0, d.trajectories[0].actions()[0]);
        assert_eq!(mu.mu, phi.to_vec());
        let mut twice = d.clone();
        twice.trajectories.push(d.trajectories[0].clone());
        assert_eq!(expert_feature_expectations(&twice, &fmap, 0.9).unwrap(), mu);
    }

    #[test]
    fn expert_mu_gamma_zero_uses_first_step() {
        let (d, fmap) = ctx_data(30);
        let mu = expert_feature_expectations(&d, &fmap, 0.0).unwrap();
        let mut want = [0.0; 2];
        for tr in &d.trajectories {
            let f = fmap.phi(&tr.history.prefix(0), tr.actions()[0]);
            want[0] += f[0] / 30.0;
            want[1] += f[1] / 30.0;
        }
        assert!((mu.mu[0] - want[0]).abs() < 1e-12 && (mu.mu[1] - want[1]).abs() < 1e-12);
        assert!(expert_feature_expectations(&d, &fmap, 1.0).is_err());
    }

    #[test]
    fn csv_layout() {
        let rows = vec![TdLogRow {
            iteration: 10,
            epsilon: 0.5,
            td_loss: 0.25,
            estimate: vec![1.0, 2.0],
        }];
        let mut buf = Vec::new();
        write_convergence_csv(&rows, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next(), Some("iteration,epsilon,td_loss,mu_1,mu_2"));
        assert!(lines.next().unwrap().starts_with("10,5.0000000000000000e-1,"));
    }
}
