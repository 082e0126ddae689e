//! The max-margin projection loop over feature expectations, reward
//! selection and the mixing-policy quadratic program.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};

use crate::cfmodel::FeatureMap;
use crate::cohort::BatchDataset;
use crate::error::{CirlError, Result};
use crate::mulearn::{estimate_mu_in, expert_feature_expectations_in, BatchContext, FeatureExpectation, TdLogRow};
use crate::oncosim::{fmt_real, RewardWeights};
use crate::policyopt::{optimize_policy_in, CandidatePolicy};
use crate::rng::{derive_seed, stream};
use crate::train::TdHyper;

pub const DEFAULT_EPSILON: f64 = 0.001;
pub const DEFAULT_MAX_ITERS: usize = 50;

/// Directions shorter than this cannot define a projection line.
pub const DEGENERATE_NORM: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub mu_bar: Vec<f64>,
    pub margin: f64,
    /// Line coefficient before clamping to `[0, 1]`.
    pub raw_coefficient: f64,
}

/// Project `mu_expert` onto the line through `mu_bar_prev` and `mu_k`,
/// clamped to the segment between them.
pub fn projection_step(mu_expert: &[f64], mu_bar_prev: &[f64], mu_k: &[f64]) -> Result<Projection> {
    if mu_expert.len() != mu_bar_prev.len() || mu_k.len() != mu_bar_prev.len() {
        return Err(CirlError::invalid("feature expectations differ in dimension"));
    }
    let dir = sub(mu_k, mu_bar_prev);
    let n = norm(&dir);
    if n < DEGENERATE_NORM {
        return Err(CirlError::DegenerateDirection { norm: n });
    }
    let raw = dot(&dir, &sub(mu_expert, mu_bar_prev)) / (n * n);
    let c = raw.clamp(0.0, 1.0);
    let mu_bar: Vec<f64> = mu_bar_prev.iter().zip(&dir).map(|(b, d)| b + c * d).collect();
    let margin = norm(&sub(mu_expert, &mu_bar));
    Ok(Projection {
        mu_bar,
        margin,
        raw_coefficient: raw,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixingPolicy {
    pub lambdas: Vec<f64>,
    pub achieved_mu: Vec<f64>,
    pub distance: f64,
}

impl MixingPolicy {
    /// Draw a component index with probabilities `lambdas`.
    pub fn sample_component(&self, rng: &mut impl rand::Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, l) in self.lambdas.iter().enumerate() {
            acc += l;
            if u < acc {
                return i;
            }
        }
        self.lambdas.iter().rposition(|&l| l > 0.0).unwrap_or(0)
    }
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

const MIXING_TOLERANCE: f64 = 1e-8;
const MIXING_MAX_STEPS: usize = 1_000_000;

/// Closest point to `mu_expert` in the convex hull of `mus`, by accelerated
/// projected gradient on the simplex with adaptive restart.
pub fn mixing_policy(mu_expert: &[f64], mus: &[Vec<f64>]) -> Result<MixingPolicy> {
    if mus.is_empty() {
        return Err(CirlError::invalid("mixing needs at least one feature expectation"));
    }
    if mus.iter().any(|m| m.len() != mu_expert.len()) {
        return Err(CirlError::invalid("feature expectations differ in dimension"));
    }
    let m = mus.len();
    let gram: Vec<Vec<f64>> = mus.iter().map(|a| mus.iter().map(|b| dot(a, b)).collect()).collect();
    let lin: Vec<f64> = mus.iter().map(|a| dot(a, mu_expert)).collect();
    let grad = |l: &[f64]| -> Vec<f64> { (0..m).map(|i| dot(&gram[i], l) - lin[i]).collect() };
    // Lipschitz constant of the gradient: the largest eigenvalue of the Gram matrix.
    let lip = {
        let mut v = vec![1.0; m];
        let mut ev = 0.0;
        for _ in 0..200 {
            let w: Vec<f64> = (0..m).map(|i| dot(&gram[i], &v)).collect();
            let n = norm(&w);
            if n == 0.0 {
                break;
            }
            ev = n / norm(&v);
            v = w.iter().map(|x| x / n).collect();
        }
        (ev * 1.01).max(gram.iter().enumerate().map(|(i, r)| r[i]).fold(0.0, f64::max) * 1e-12)
    };
    let mut lambda = vec![1.0 / m as f64; m];
    if lip > 0.0 {
        let step = 1.0 / lip;
        let objective = |l: &[f64]| 0.5 * dot(l, &(0..m).map(|i| dot(&gram[i], l)).collect::<Vec<_>>()) - dot(&lin, l);
        let mut y = lambda.clone();
        let mut t = 1.0f64;
        let mut prev_obj = objective(&lambda);
        for _ in 0..MIXING_MAX_STEPS {
            let g = grad(&y);
            let next = project_simplex(&y.iter().zip(&g).map(|(a, b)| a - step * b).collect::<Vec<_>>());
            let obj = objective(&next);
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            if obj > prev_obj {
                // restart momentum
                y = lambda.clone();
                t = 1.0;
                continue;
            }
            y = next
                .iter()
                .zip(&lambda)
                .map(|(n, o)| n + (t - 1.0) / t_next * (n - o))
                .collect();
            lambda = next;
            t = t_next;
            prev_obj = obj;
            // stationarity: norm of the gradient mapping at lambda
            let gl = grad(&lambda);
            let mapped = project_simplex(&lambda.iter().zip(&gl).map(|(a, b)| a - step * b).collect::<Vec<_>>());
            if lip * norm(&sub(&lambda, &mapped)) <= MIXING_TOLERANCE {
                break;
            }
        }
    }
    let achieved: Vec<f64> = (0..mu_expert.len())
        .map(|j| mus.iter().zip(&lambda).map(|(mu, l)| l * mu[j]).sum())
        .collect();
    Ok(MixingPolicy {
        distance: norm(&sub(mu_expert, &achieved)),
        lambdas: lambda,
        achieved_mu: achieved,
    })
}

/// The two sub-problems the outer loop delegates.
pub trait CirlSolver {
    type Policy;

    /// Optimal policy for the reward `w . phi` at outer iteration `k`.
    fn optimal_policy(&mut self, w: &[f64], k: usize) -> Result<Self::Policy>;

    fn feature_expectations(&mut self, policy: &Self::Policy, k: usize) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CirlStatus {
    Converged,
    MaxIterations,
    /// Two consecutive degenerate projection directions.
    Stalled,
}

impl CirlStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            CirlStatus::Converged => "converged",
            CirlStatus::MaxIterations => "max_iterations",
            CirlStatus::Stalled => "stalled",
        }
    }
}

/// Outer-loop state: policies, their feature expectations and the weights
/// that produced them are aligned by iteration (index 0 is the random start).
#[derive(Debug, Clone)]
pub struct CirlState<P> {
    pub mu_expert: Vec<f64>,
    pub mu_bar: Vec<f64>,
    pub policies: Vec<P>,
    pub mus: Vec<Vec<f64>>,
    pub weights_history: Vec<Vec<f64>>,
    /// `t_k` for `k = 1..`.
    pub margins: Vec<f64>,
    pub k: usize,
}

#[derive(Debug, Clone)]
pub struct CirlRun<P> {
    pub state: CirlState<P>,
    pub status: CirlStatus,
    /// `argmin_k |mu_E - mu_k|`.
    pub selected: usize,
}

impl<P> CirlRun<P> {
    pub fn selected_weights(&self) -> &[f64] {
        &self.state.weights_history[self.selected]
    }

    pub fn distance(&self, k: usize) -> f64 {
        norm(&sub(&self.state.mu_expert, &self.state.mus[k]))
    }
}

fn at_iteration(iteration: usize) -> impl FnOnce(CirlError) -> CirlError {
    move |e| CirlError::AtIteration {
        iteration,
        source: Box::new(e),
    }
}

/// Run the projection loop from initial weights `w0`.
pub fn run_projection<S: CirlSolver>(
    solver: &mut S,
    mu_expert: &[f64],
    w0: &[f64],
    epsilon: f64,
    max_iters: usize,
) -> Result<CirlRun<S::Policy>> {
    if !(epsilon > 0.0) {
        return Err(CirlError::invalid("epsilon must be positive"));
    }
    let pi0 = solver.optimal_policy(w0, 0).map_err(at_iteration(0))?;
    let mu0 = solver.feature_expectations(&pi0, 0).map_err(at_iteration(0))?;
    let mut state = CirlState {
        mu_expert: mu_expert.to_vec(),
        mu_bar: mu0.clone(),
        policies: vec![pi0],
        mus: vec![mu0],
        weights_history: vec![w0.to_vec()],
        margins: Vec::new(),
        k: 0,
    };
    let mut status = CirlStatus::MaxIterations;
    let mut degenerate_streak = 0;
    for k in 1..=max_iters {
        let w = sub(mu_expert, &state.mu_bar);
        let pi = solver.optimal_policy(&w, k).map_err(at_iteration(k))?;
        let mu = solver.feature_expectations(&pi, k).map_err(at_iteration(k))?;
        let margin = match projection_step(mu_expert, &state.mu_bar, &mu) {
            Ok(p) => {
                degenerate_streak = 0;
                state.mu_bar = p.mu_bar;
                p.margin
            }
            Err(CirlError::DegenerateDirection { norm }) => {
                degenerate_streak += 1;
                log::warn!("iteration {k}: degenerate projection direction (norm {norm:e})");
                norm_of_gap(mu_expert, &state.mu_bar)
            }
            Err(e) => return Err(at_iteration(k)(e)),
        };
        state.policies.push(pi);
        state.mus.push(mu);
        state.weights_history.push(w);
        state.margins.push(margin);
        state.k = k;
        log::info!("iteration {k}: margin {margin:.6}");
        if degenerate_streak >= 2 {
            status = CirlStatus::Stalled;
            break;
        }
        if margin < epsilon {
            status = CirlStatus::Converged;
            break;
        }
    }
    let selected = (0..state.mus.len())
        .min_by(|&a, &b| norm_of_gap(mu_expert, &state.mus[a]).total_cmp(&norm_of_gap(mu_expert, &state.mus[b])))
        .expect("at least the initial policy");
    Ok(CirlRun {
        state,
        status,
        selected,
    })
}

fn norm_of_gap(a: &[f64], b: &[f64]) -> f64 {
    norm(&sub(a, b))
}

/// Uniform direction on the unit sphere in `d` dimensions.
pub fn random_unit_weights(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, 0);
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// Hyperparameters of a full batch run.
#[derive(Debug, Clone, PartialEq)]
pub struct CirlHyper {
    pub epsilon: f64,
    pub max_iters: usize,
    pub policy: TdHyper,
    pub mu: TdHyper,
    pub seed: u64,
}

impl Default for CirlHyper {
    fn default() -> Self {
        CirlHyper {
            epsilon: DEFAULT_EPSILON,
            max_iters: DEFAULT_MAX_ITERS,
            policy: TdHyper::policy_defaults(),
            mu: TdHyper::mu_defaults(),
            seed: 0,
        }
    }
}

struct BatchSolver<'a, 'b> {
    ctx: &'b BatchContext<'a>,
    gamma: f64,
    hyper: &'b CirlHyper,
    mu_logs: Vec<Vec<TdLogRow>>,
}

impl CirlSolver for BatchSolver<'_, '_> {
    type Policy = CandidatePolicy;

    fn optimal_policy(&mut self, w: &[f64], k: usize) -> Result<CandidatePolicy> {
        // Rescaled to unit length; the optimal greedy policy is unchanged.
        let n = norm(w);
        let unit: Vec<f64> = if n > 0.0 {
            w.iter().map(|x| x / n).collect()
        } else {
            w.to_vec()
        };
        let hyper = TdHyper {
            seed: derive_seed(self.hyper.seed, &format!("policy/{k}")),
            ..self.hyper.policy.clone()
        };
        optimize_policy_in(&unit, self.ctx, self.gamma, &hyper)
    }

    fn feature_expectations(&mut self, policy: &CandidatePolicy, k: usize) -> Result<Vec<f64>> {
        let hyper = TdHyper {
            seed: derive_seed(self.hyper.seed, &format!("mu/{k}")),
            ..self.hyper.mu.clone()
        };
        let est = estimate_mu_in(policy, self.ctx, self.gamma, &hyper)?;
        self.mu_logs.push(est.log);
        Ok(est.mu.mu)
    }
}

/// Result of a batch run on logged data.
#[derive(Debug, Clone)]
pub struct CirlResult {
    pub run: CirlRun<CandidatePolicy>,
    pub mu_expert: FeatureExpectation,
    /// `w_K`, l1-normalized.
    pub selected_weights: RewardWeights,
    pub mixing: MixingPolicy,
    /// Convergence logs of each feature-expectation estimate, by iteration.
    pub mu_logs: Vec<Vec<TdLogRow>>,
}

impl CirlResult {
    pub fn selected_policy(&self) -> &CandidatePolicy {
        &self.run.state.policies[self.run.selected]
    }
}

pub fn run_cirl(dataset: &BatchDataset, fmap: &FeatureMap, gamma: f64, hyper: &CirlHyper) -> Result<CirlResult> {
    let ctx = BatchContext::new(dataset, fmap)?;
    run_cirl_in(&ctx, gamma, hyper)
}

pub fn run_cirl_in(ctx: &BatchContext<'_>, gamma: f64, hyper: &CirlHyper) -> Result<CirlResult> {
    let mu_expert = expert_feature_expectations_in(ctx, gamma)?;
    let w0 = random_unit_weights(mu_expert.dim(), derive_seed(hyper.seed, "w0"));
    let mut solver = BatchSolver {
        ctx,
        gamma,
        hyper,
        mu_logs: Vec::new(),
    };
    let run = run_projection(&mut solver, &mu_expert.mu, &w0, hyper.epsilon, hyper.max_iters)?;
    let selected_weights = RewardWeights::unnormalized(run.selected_weights().to_vec(), gamma)?.l1_normalized();
    let mixing = mixing_policy(&mu_expert.mu, &run.state.mus)?;
    Ok(CirlResult {
        mu_logs: solver.mu_logs,
        run,
        mu_expert,
        selected_weights,
        mixing,
    })
}

/// One row per outer iteration:
/// `k,w_1..w_d,w1_1..w1_d,mu_1..mu_d,margin,distance,selected`.
pub fn write_iterations_csv<P, W: Write>(run: &CirlRun<P>, mut out: W) -> Result<()> {
    let d = run.state.mu_expert.len();
    let mut header = vec!["k".to_string()];
    header.extend((1..=d).map(|j| format!("w_{j}")));
    header.extend((1..=d).map(|j| format!("w_l1_{j}")));
    header.extend((1..=d).map(|j| format!("mu_{j}")));
    header.extend(["margin", "distance", "selected"].map(String::from));
    writeln!(out, "{}", header.join(","))?;
    for k in 0..run.state.mus.len() {
        let w = &run.state.weights_history[k];
        let l1: f64 = w.iter().map(|v| v.abs()).sum();
        let mut row = vec![k.to_string()];
        row.extend(w.iter().map(|v| fmt_real(*v)));
        row.extend(w.iter().map(|v| fmt_real(if l1 > 0.0 { v / l1 } else { 0.0 })));
        row.extend(run.state.mus[k].iter().map(|v| fmt_real(*v)));
        row.push(if k == 0 {
            String::new()
        } else {
            fmt_real(run.state.margins[k - 1])
        });
        row.push(fmt_real(run.distance(k)));
        row.push(u8::from(k == run.selected).to_string());
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
