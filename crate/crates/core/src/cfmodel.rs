//! One-step counterfactual outcome models and the feature map built on them.
//!
//! `phi(h, a) = (x_hat / x_max, z_hat / z_max) / sqrt(2)` where `(x_hat, z_hat)`
//! is the predicted next covariate pair had `a` been taken after `h`.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::cohort::{self, BatchDataset, Trajectory};
use crate::error::{CirlError, Result};
use crate::history::{Encoder, History, INPUT_DIM};
use crate::oncosim::{self, EnvState, SimConfig};
use crate::rng::stream;
use crate::seqnet::{self, init_network, Gradients, NetworkParams, OptimizerState, Runner};
use crate::train::{LossTrace, SupervisedHyper};

/// Dimension of the feature map.
pub const FEATURE_DIM: usize = 2;

/// Stabilized weights are clipped to this range.
pub const WEIGHT_CLIP: (f64, f64) = (0.1, 10.0);

/// Dynamics outputs are covariate increments divided by `max / DELTA_SCALE`.
const DELTA_SCALE: f64 = 5.0;

/// Share of trajectories held out for model selection.
pub const VALIDATION_FRACTION: f64 = 0.1;

/// Something that predicts next covariates under both actions.
pub trait CounterfactualModel: Sync {
    /// `[prediction for a=0, prediction for a=1]` after every prefix `h_t`,
    /// `t < steps`, of `history`. Predictions lie in `[0, x_max] x [0, z_max]`.
    fn predict_table(&self, history: &History, steps: usize) -> Vec<[[f64; 2]; 2]>;

    fn predict(&self, history: &History, action: u8) -> [f64; 2] {
        let t = history.t();
        let mut padded = history.clone();
        padded.actions.push(0);
        self.predict_table(&padded, t + 1)[t][action as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DynamicsMode {
    IptwHistory,
    PlainHistory,
    PlainMemoryless,
}

impl DynamicsMode {
    pub const ALL: [DynamicsMode; 3] = [
        DynamicsMode::IptwHistory,
        DynamicsMode::PlainHistory,
        DynamicsMode::PlainMemoryless,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DynamicsMode::IptwHistory => "iptw_history",
            DynamicsMode::PlainHistory => "plain_history",
            DynamicsMode::PlainMemoryless => "plain_memoryless",
        }
    }

    /// Short CLI spelling.
    pub fn cli_name(&self) -> &'static str {
        match self {
            DynamicsMode::IptwHistory => "iptw",
            DynamicsMode::PlainHistory => "plain-h",
            DynamicsMode::PlainMemoryless => "plain-x",
        }
    }

    fn uses_history(&self) -> bool {
        !matches!(self, DynamicsMode::PlainMemoryless)
    }
}

impl fmt::Display for DynamicsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DynamicsMode {
    type Err = CirlError;

    fn from_str(s: &str) -> Result<Self> {
        DynamicsMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s || m.cli_name() == s)
            .ok_or_else(|| CirlError::invalid(format!("unknown dynamics mode `{s}` (iptw, plain-h, plain-x)")))
    }
}

/// History-conditioned probability of treatment.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    pub net: NetworkParams,
    pub encoder: Encoder,
    /// Held-out mean log-loss at the retained parameters.
    pub validation_loss: f64,
}

impl PropensityModel {
    /// `P(a_t = 1 | h_t)` for every `t < steps`.
    pub fn probabilities(&self, history: &History, steps: usize) -> Vec<f64> {
        let seq = self.encoder.encode(&history.covariates[..steps], &history.actions);
        let (out, _) = seqnet::forward(&self.net, &seq).expect("encoder matches network input");
        out.into_iter().map(sigmoid).collect()
    }

    pub fn prob_treat(&self, history: &History) -> f64 {
        let y = seqnet::eval_last(&self.net, &self.encoder.encode_history(history)).expect("encoder matches network");
        sigmoid(y[0])
    }

    /// Mean log-loss over all logged actions of `dataset`.
    pub fn log_loss(&self, dataset: &BatchDataset) -> f64 {
        let (sum, n) = dataset
            .trajectories
            .iter()
            .map(|tr| {
                let p = self.probabilities(&tr.history, tr.len());
                let l: f64 = p.iter().zip(tr.actions()).map(|(&p, &a)| bernoulli_nll(p, a)).sum();
                (l, tr.len())
            })
            .fold((0.0, 0), |(s, n), (l, k)| (s + l, n + k));
        sum / n as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        seqnet::save_params(&self.net, path)
    }

    pub fn load(path: &Path, config: &SimConfig) -> Result<Self> {
        Ok(PropensityModel {
            net: seqnet::load_params(path)?,
            encoder: Encoder::new(config),
            validation_loss: f64::NAN,
        })
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn bernoulli_nll(p: f64, a: u8) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    if a == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Recurrent one-step dynamics. The head emits scaled increments for both
/// actions: `[dx(0), dz(0), dx(1), dz(1)]`.
#[derive(Debug, Clone)]
pub struct DynamicsModel {
    pub net: NetworkParams,
    pub mode: DynamicsMode,
    pub encoder: Encoder,
    pub bounds: [f64; 2],
    /// Held-out weighted mean squared error (scaled units) at the retained parameters.
    pub validation_loss: f64,
}

impl DynamicsModel {
    fn decode(&self, cov: [f64; 2], y: &[f64]) -> [[f64; 2]; 2] {
        let mut out = [[0.0; 2]; 2];
        for a in 0..2 {
            for k in 0..2 {
                let v = cov[k] + y[2 * a + k] * self.bounds[k] / DELTA_SCALE;
                out[a][k] = v.clamp(0.0, self.bounds[k]);
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "cirl-dynamics v1 mode={}", self.mode.as_str())?;
        seqnet::write_params(&self.net, &mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, config: &SimConfig) -> Result<Self> {
        let name = path.display().to_string();
        let mut r = BufReader::new(File::open(path)?);
        let mut first = String::new();
        r.read_line(&mut first)?;
        let mode = first
            .trim_end()
            .strip_prefix("cirl-dynamics v1 mode=")
            .ok_or_else(|| CirlError::parse(&name, 1, "expected `cirl-dynamics v1 mode=...`"))?
            .parse()
            .map_err(|e: CirlError| CirlError::parse(&name, 1, e.to_string()))?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        let net = seqnet::read_params(&rest[..], &name)?;
        Ok(DynamicsModel {
            net,
            mode,
            encoder: Encoder::new(config),
            bounds: [config.x_max, config.z_max],
            validation_loss: f64::NAN,
        })
    }
}

impl CounterfactualModel for DynamicsModel {
    fn predict_table(&self, history: &History, steps: usize) -> Vec<[[f64; 2]; 2]> {
        let p = &self.net;
        let mut out = Vec::with_capacity(steps);
        if self.mode.uses_history() {
            let mut runner = Runner::new(p);
            for t in 0..steps {
                let prev = if t == 0 { 0 } else { history.actions[t - 1] };
                let cov = history.covariates[t];
                runner.step(p, &self.encoder.step(cov, prev, t));
                out.push(self.decode(cov, &runner.output(p)));
            }
        } else {
            for &cov in &history.covariates[..steps] {
                let mut runner = Runner::new(p);
                runner.step(p, &self.encoder.memoryless(cov));
                out.push(self.decode(cov, &runner.output(p)));
            }
        }
        out
    }
}

/// Rebuild the simulator state reached by a history (buffers padded as at reset).
pub fn state_from_history(config: &SimConfig, history: &History) -> EnvState {
    let p = config.p;
    let t = history.t();
    let covs = &history.covariates;
    let mut x_buffer = Vec::with_capacity(p);
    let mut z_buffer = Vec::with_capacity(p);
    let mut a_buffer = Vec::with_capacity(p);
    for k in 0..p {
        // position k of the buffer holds time index t - (p - 1) + k
        let idx = (t + k).checked_sub(p - 1);
        let c = idx.map_or(covs[0], |i| covs[i]);
        x_buffer.push(c[0]);
        z_buffer.push(c[1]);
        let a = idx.and_then(|i| i.checked_sub(1)).map_or(0, |i| history.actions[i]);
        a_buffer.push(a);
    }
    EnvState {
        x_buffer,
        z_buffer,
        a_buffer,
        t,
        termination: None,
    }
}

/// Noise-free simulator mean, clamped; the counterfactual oracle. An additive
/// `bias` in covariate units degrades it on purpose.
#[derive(Debug, Clone)]
pub struct SimulatorModel {
    pub config: SimConfig,
    pub bias: [f64; 2],
}

impl SimulatorModel {
    pub fn exact(config: &SimConfig) -> Self {
        SimulatorModel {
            config: config.clone(),
            bias: [0.0; 2],
        }
    }

    pub fn biased(config: &SimConfig, bias: [f64; 2]) -> Self {
        SimulatorModel {
            config: config.clone(),
            bias,
        }
    }

    fn next(&self, state: &EnvState, a: u8) -> [f64; 2] {
        let (x, z) = oncosim::mean_dynamics(&self.config, state, a);
        [
            (x + self.bias[0]).clamp(0.0, self.config.x_max),
            (z + self.bias[1]).clamp(0.0, self.config.z_max),
        ]
    }
}

impl CounterfactualModel for SimulatorModel {
    fn predict_table(&self, history: &History, steps: usize) -> Vec<[[f64; 2]; 2]> {
        (0..steps)
            .map(|t| {
                let s = state_from_history(&self.config, &history.prefix(t));
                [self.next(&s, 0), self.next(&s, 1)]
            })
            .collect()
    }
}

/// The learned or oracle counterfactual model with the feature normalization.
pub struct FeatureMap {
    model: Box<dyn CounterfactualModel>,
    config: SimConfig,
    scale: f64,
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureMap")
            .field("scale", &self.scale)
            .finish_non_exhaustive()
    }
}

impl FeatureMap {
    pub fn new(model: Box<dyn CounterfactualModel>, config: &SimConfig) -> Self {
        FeatureMap {
            model,
            config: config.clone(),
            scale: 1.0 / (FEATURE_DIM as f64).sqrt(),
        }
    }

    pub fn from_dynamics(model: DynamicsModel, config: &SimConfig) -> Self {
        FeatureMap::new(Box::new(model), config)
    }

    pub fn simulator(config: &SimConfig) -> Self {
        FeatureMap::new(Box::new(SimulatorModel::exact(config)), config)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn model(&self) -> &dyn CounterfactualModel {
        self.model.as_ref()
    }

    /// Normalized features of a predicted covariate pair.
    pub fn features(&self, next: [f64; 2]) -> [f64; FEATURE_DIM] {
        let f = [
            self.scale * next[0] / self.config.x_max,
            self.scale * next[1] / self.config.z_max,
        ];
        debug_assert!(f[0].hypot(f[1]) <= 1.0 + 1e-12);
        f
    }

    /// Inverse of [`FeatureMap::features`].
    pub fn covariates(&self, phi: [f64; FEATURE_DIM]) -> [f64; 2] {
        [
            phi[0] * self.config.x_max / self.scale,
            phi[1] * self.config.z_max / self.scale,
        ]
    }

    pub fn phi(&self, history: &History, action: u8) -> [f64; FEATURE_DIM] {
        self.features(self.model.predict(history, action))
    }

    /// `(h, a, predicted next covariates)`.
    pub fn next_history(&self, history: &History, action: u8) -> Result<History> {
        if let Some(reason) = history.termination(&self.config) {
            return Err(CirlError::InvalidState(format!(
                "cannot extend a terminal history ({reason})"
            )));
        }
        Ok(history.extended(action, self.model.predict(history, action)))
    }
}

/// Per-trajectory counterfactual quantities for every logged prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFeatures {
    /// Predicted next covariates `[a=0, a=1]` after `h_t`.
    pub branches: Vec<[[f64; 2]; 2]>,
    pub phi: Vec<[[f64; FEATURE_DIM]; 2]>,
    /// Whether `(h_t, a, prediction)` is terminal.
    pub terminal: Vec<[bool; 2]>,
}

/// Features of every `(trajectory, t, a)` of a dataset, computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub rows: Vec<TrajectoryFeatures>,
}

impl FeatureTable {
    pub fn build(dataset: &BatchDataset, fmap: &FeatureMap) -> FeatureTable {
        let rows = dataset
            .trajectories
            .par_iter()
            .map(|tr| {
                let t_len = tr.len();
                let branches = fmap.model.predict_table(&tr.history, t_len);
                let phi = branches
                    .iter()
                    .map(|b| [fmap.features(b[0]), fmap.features(b[1])])
                    .collect();
                let terminal = branches
                    .iter()
                    .enumerate()
                    .map(|(t, b)| {
                        let term = |c: [f64; 2]| fmap.config.termination(c[0], c[1], t + 1).is_some();
                        [term(b[0]), term(b[1])]
                    })
                    .collect();
                TrajectoryFeatures {
                    branches,
                    phi,
                    terminal,
                }
            })
            .collect();
        FeatureTable { rows }
    }
}

/// Generic minibatch trainer for the supervised sequence models. `loss`
/// returns `(sum of per-sample losses, sample count)` for one example and,
/// given a buffer, accumulates the gradient of the summed loss into it.
fn fit_supervised<E, F>(
    mut params: NetworkParams,
    hyper: &SupervisedHyper,
    stage: &'static str,
    train: &[E],
    validation: &[E],
    loss: F,
) -> Result<(NetworkParams, f64)>
where
    E: Sync,
    F: Fn(&E, &NetworkParams, Option<&mut Gradients>) -> Result<(f64, usize)> + Sync,
{
    if train.is_empty() {
        return Err(CirlError::invalid("no training examples"));
    }
    let mut opt = OptimizerState::new(params.dims(), hyper.adam())?;
    let mut rng = stream(hyper.seed, 0xf17);
    let mut grads = Gradients::zeros(params.dims());
    let mut trace = LossTrace::default();
    let eval = |p: &NetworkParams| -> Result<f64> {
        let set = if validation.is_empty() { train } else { validation };
        let (s, n) = set
            .iter()
            .map(|e| loss(e, p, None))
            .try_fold((0.0, 0usize), |(s, n), r| r.map(|(l, k)| (s + l, n + k)))?;
        Ok(s / n.max(1) as f64)
    };
    let eval_every = (hyper.iterations / 20).max(1);
    let mut best = (eval(&params)?, params.clone());
    for iter in 1..=hyper.iterations {
        grads.clear();
        let mut total = 0.0;
        let mut count = 0;
        for _ in 0..hyper.batch_size {
            let e = &train[rng.random_range(0..train.len())];
            let (l, n) = loss(e, &params, Some(&mut grads))?;
            total += l;
            count += n;
        }
        if count == 0 {
            continue;
        }
        let mean = total / count as f64;
        trace.push(mean);
        if !mean.is_finite() {
            return Err(CirlError::Divergence {
                stage,
                iteration: iter,
                recent: trace.recent(),
            });
        }
        grads.scale(1.0 / count as f64);
        opt.step(&mut params, &grads)?;
        if iter % eval_every == 0 || iter == hyper.iterations {
            let v = eval(&params)?;
            log::debug!("{stage} iter {iter}: train {mean:.6} validation {v:.6}");
            if v < best.0 {
                best = (v, params.clone());
            }
        }
    }
    Ok((best.1, best.0))
}

/// Fit `P(a_t = 1 | h_t)` by cross-entropy over all logged decisions.
/// Refuses datasets with overlap warnings unless `force` is set.
pub fn fit_propensity(dataset: &BatchDataset, hyper: &SupervisedHyper, force: bool) -> Result<PropensityModel> {
    dataset.validate()?;
    let report = cohort::audit(dataset);
    if report.has_overlap_warnings() {
        if !force {
            return Err(CirlError::OverlapViolation {
                count: report.warnings.len(),
            });
        }
        log::warn!(
            "fitting propensity despite {} overlap warning(s)",
            report.warnings.len()
        );
    }
    let encoder = Encoder::new(&dataset.sim_config);
    let (train, val) = dataset.split(1.0 - VALIDATION_FRACTION, hyper.seed);
    let prep = |d: &BatchDataset| -> Vec<(Vec<f64>, Vec<u8>)> {
        d.trajectories
            .iter()
            .map(|tr| {
                (
                    encoder.encode(&tr.covariates()[..tr.len()], tr.actions()),
                    tr.actions().to_vec(),
                )
            })
            .collect()
    };
    let (train, val) = (prep(&train), prep(&val));
    let net = init_network(hyper.seed, INPUT_DIM, hyper.hidden_dim, 1)?;
    let (net, validation_loss) = fit_supervised(net, hyper, "propensity fit", &train, &val, |(seq, actions), p, g| {
        let (out, cache) = seqnet::forward(p, seq)?;
        let mut l = 0.0;
        let mut dy = vec![0.0; out.len()];
        for (t, &a) in actions.iter().enumerate() {
            let prob = sigmoid(out[t]);
            l += bernoulli_nll(prob, a);
            dy[t] = prob - f64::from(a);
        }
        if let Some(g) = g {
            seqnet::backward_into(p, &cache, &dy, g)?;
        }
        Ok((l, actions.len()))
    })?;
    Ok(PropensityModel {
        net,
        encoder,
        validation_loss,
    })
}

/// Stabilized inverse-propensity weight of each logged decision:
/// `P(A = a_t) / e(a_t | h_t)`, clipped to [`WEIGHT_CLIP`].
pub fn stabilized_weights(dataset: &BatchDataset, propensity: &PropensityModel) -> Result<Vec<Vec<f64>>> {
    let (treated, total) = dataset
        .trajectories
        .iter()
        .flat_map(|t| t.actions())
        .fold((0usize, 0usize), |(a, n), &x| (a + usize::from(x), n + 1));
    let marginal1 = treated as f64 / total as f64;
    dataset
        .trajectories
        .iter()
        .map(|tr| {
            let probs = propensity.probabilities(&tr.history, tr.len());
            probs
                .iter()
                .zip(tr.actions())
                .enumerate()
                .map(|(t, (&p1, &a))| {
                    let (num, den) = if a == 1 {
                        (marginal1, p1)
                    } else {
                        (1.0 - marginal1, 1.0 - p1)
                    };
                    let w = (num / den).clamp(WEIGHT_CLIP.0, WEIGHT_CLIP.1);
                    if w.is_finite() {
                        Ok(w)
                    } else {
                        Err(CirlError::NonFiniteWeight {
                            record: format!("trajectory {} t={t}", tr.id),
                        })
                    }
                })
                .collect()
        })
        .collect()
}

struct DynExample {
    /// One flat input sequence per recurrent pass.
    passes: Vec<Vec<f64>>,
    /// `(pass, step, action, target, weight)`.
    targets: Vec<(usize, usize, u8, [f64; 2], f64)>,
}

fn dynamics_examples(
    trajectories: &[Trajectory],
    weights: &[Vec<f64>],
    encoder: &Encoder,
    mode: DynamicsMode,
) -> Vec<DynExample> {
    let scale = [encoder.x_scale / DELTA_SCALE, encoder.z_scale / DELTA_SCALE];
    trajectories
        .iter()
        .zip(weights)
        .map(|(tr, w)| {
            let covs = tr.covariates();
            let target = |t: usize| {
                [
                    (covs[t + 1][0] - covs[t][0]) / scale[0],
                    (covs[t + 1][1] - covs[t][1]) / scale[1],
                ]
            };
            if mode.uses_history() {
                DynExample {
                    passes: vec![encoder.encode(&covs[..tr.len()], tr.actions())],
                    targets: (0..tr.len())
                        .map(|t| (0, t, tr.actions()[t], target(t), w[t]))
                        .collect(),
                }
            } else {
                DynExample {
                    passes: (0..tr.len()).map(|t| encoder.memoryless(covs[t]).to_vec()).collect(),
                    targets: (0..tr.len())
                        .map(|t| (t, 0, tr.actions()[t], target(t), w[t]))
                        .collect(),
                }
            }
        })
        .collect()
}

/// Fit the one-step dynamics by (weighted) squared error on the observed
/// next covariates of the logged action.
pub fn fit_dynamics(
    dataset: &BatchDataset,
    propensity: Option<&PropensityModel>,
    mode: DynamicsMode,
    hyper: &SupervisedHyper,
) -> Result<DynamicsModel> {
    dataset.validate()?;
    let weights = match (mode, propensity) {
        (DynamicsMode::IptwHistory, Some(p)) => stabilized_weights(dataset, p)?,
        (DynamicsMode::IptwHistory, None) => {
            return Err(CirlError::invalid("iptw_history dynamics need a propensity model"))
        }
        _ => dataset.trajectories.iter().map(|t| vec![1.0; t.len()]).collect(),
    };
    let config = &dataset.sim_config;
    let encoder = Encoder::new(config);
    let all = dynamics_examples(&dataset.trajectories, &weights, &encoder, mode);
    let (train_ds, _) = dataset.split(1.0 - VALIDATION_FRACTION, hyper.seed);
    let in_train: std::collections::HashSet<u64> = train_ds.trajectories.iter().map(|t| t.id).collect();
    let (train, val): (Vec<_>, Vec<_>) = all
        .into_iter()
        .zip(&dataset.trajectories)
        .partition(|(_, tr)| in_train.contains(&tr.id));
    let train: Vec<DynExample> = train.into_iter().map(|(e, _)| e).collect();
    let val: Vec<DynExample> = val.into_iter().map(|(e, _)| e).collect();

    let net = init_network(hyper.seed, INPUT_DIM, hyper.hidden_dim, 2 * FEATURE_DIM)?;
    let (net, validation_loss) = fit_supervised(net, hyper, "dynamics fit", &train, &val, |ex, p, mut g| {
        let mut l = 0.0;
        let mut n = 0;
        for (k, seq) in ex.passes.iter().enumerate() {
            let (out, cache) = seqnet::forward(p, seq)?;
            let mut dy = vec![0.0; out.len()];
            for &(_, t, a, y, w) in ex.targets.iter().filter(|tg| tg.0 == k) {
                let base = t * 2 * FEATURE_DIM + 2 * a as usize;
                for c in 0..2 {
                    let e = out[base + c] - y[c];
                    l += w * e * e;
                    dy[base + c] = 2.0 * w * e;
                }
                n += 1;
            }
            if let Some(g) = g.as_deref_mut() {
                seqnet::backward_into(p, &cache, &dy, g)?;
            }
        }
        Ok((l, n))
    })?;
    Ok(DynamicsModel {
        net,
        mode,
        encoder,
        bounds: [config.x_max, config.z_max],
        validation_loss,
    })
}

/// Root-mean-square error (covariate units, pooled over `x` and `z`) of the
/// model's prediction for the logged action against the logged next covariates.
pub fn factual_rmse(model: &dyn CounterfactualModel, dataset: &BatchDataset) -> f64 {
    let (sum, n) = dataset
        .trajectories
        .par_iter()
        .map(|tr| {
            let table = model.predict_table(&tr.history, tr.len());
            let covs = tr.covariates();
            let s: f64 = table
                .iter()
                .zip(tr.actions())
                .enumerate()
                .map(|(t, (b, &a))| sq_dist(b[a as usize], covs[t + 1]))
                .sum();
            (s, 2 * tr.len())
        })
        .reduce(|| (0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    (sum / n as f64).sqrt()
}

/// RMSE of the prediction for the action not taken against `oracle`.
pub fn counterfactual_rmse(
    model: &dyn CounterfactualModel,
    oracle: &dyn CounterfactualModel,
    dataset: &BatchDataset,
) -> f64 {
    let (sum, n) = dataset
        .trajectories
        .par_iter()
        .map(|tr| {
            let table = model.predict_table(&tr.history, tr.len());
            let truth = oracle.predict_table(&tr.history, tr.len());
            let s: f64 = tr
                .actions()
                .iter()
                .enumerate()
                .map(|(t, &a)| {
                    let flip = 1 - a as usize;
                    sq_dist(table[t][flip], truth[t][flip])
                })
                .sum();
            (s, 2 * tr.len())
        })
        .reduce(|| (0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    (sum / n as f64).sqrt()
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::generate_with;
    use crate::policy::ConstantPolicy;

    #[test]
    fn phi_normalization() {
        let c = SimConfig::default();
        let fmap = FeatureMap::simulator(&c);
        let f = fmap.features([32.5, 0.0]);
        assert!((f[0] - 0.65 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(f[1], 0.0);
        assert!((f[0] - 0.459_619_407_771_256_5).abs() < 1e-12);
        assert_eq!(fmap.covariates(f), [32.5, 0.0]);
        let corner = fmap.features([c.x_max, c.z_max]);
        assert!((corner[0].hypot(corner[1]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn state_reconstruction_matches_simulation() {
        let c = SimConfig::default();
        let mut rng = stream(5, 0);
        let mut s = oncosim::reset(&c, &mut rng);
        let mut h = History::initial(s.x(), s.z());
        for a in [1u8, 1, 0, 1, 0, 0, 1, 1] {
            assert_eq!(state_from_history(&c, &h), s);
            let (n, x, z) = oncosim::step(&c, &s, a, &mut rng).unwrap();
            h.push(a, [x, z]);
            s = n;
            if s.terminated() {
                break;
            }
        }
    }

    #[test]
    fn next_history_appends_prediction() {
        let c = SimConfig::default();
        let fmap = FeatureMap::simulator(&c);
        let h = History::initial(30.0, 2.0);
        let h0 = fmap.next_history(&h, 0).unwrap();
        let h1 = fmap.next_history(&h, 1).unwrap();
        assert_eq!(h0.t(), 1);
        assert_eq!(h0.prefix(0), h1.prefix(0));
        assert_eq!(fmap.features(h0.last()), fmap.phi(&h, 0));
        assert_eq!(h0.last(), [32.5, 0.0]);
        assert_eq!(h1.last(), [30.0, 0.0]);
        let dead = History::initial(0.0, 1.0);
        assert!(matches!(fmap.next_history(&dead, 1), Err(CirlError::InvalidState(_))));
    }

    #[test]
    fn modes_parse() {
        for m in DynamicsMode::ALL {
            assert_eq!(m.as_str().parse::<DynamicsMode>().unwrap(), m);
            assert_eq!(m.cli_name().parse::<DynamicsMode>().unwrap(), m);
        }
        assert!("lstm".parse::<DynamicsMode>().is_err());
    }

    #[test]
    fn iptw_requires_propensity_and_plain_weights_are_one() {
        let d = generate_with(&ConstantPolicy::UNIFORM, "u", &SimConfig::default(), 20, 1).unwrap();
        let h = SupervisedHyper {
            iterations: 1,
            hidden_dim: 4,
            batch_size: 2,
            ..SupervisedHyper::default()
        };
        assert!(fit_dynamics(&d, None, DynamicsMode::IptwHistory, &h).is_err());
        let ex = dynamics_examples(
            &d.trajectories,
            &d.trajectories.iter().map(|t| vec![1.0; t.len()]).collect::<Vec<_>>(),
            &Encoder::new(&d.sim_config),
            DynamicsMode::PlainHistory,
        );
        assert!(ex.iter().flat_map(|e| &e.targets).all(|t| t.4 == 1.0));
    }

    #[test]
    fn deterministic_policy_is_refused() {
        let d = generate_with(&ConstantPolicy::ALWAYS, "a", &SimConfig::default(), 20, 1).unwrap();
        let h = SupervisedHyper {
            iterations: 1,
            ..SupervisedHyper::default()
        };
        assert!(matches!(
            fit_propensity(&d, &h, false),
            Err(CirlError::OverlapViolation { .. })
        ));
        assert!(fit_propensity(&d, &h, true).is_ok());
    }
}
