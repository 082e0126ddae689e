//! Experiment configuration: flat `key = value` text with dotted section
//! prefixes. Every key can also be overridden from the command line.
//!
//! ```text
//! # comment
//! seed = 0
//! budget = 0.25
//! sim.p = 5
//! cirl.mu.hidden_dim = 32
//! ```
//!
//! Setting `sim.p` without the drift keys re-derives the drifts for that order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::cfmodel::DynamicsMode;
use crate::cirl::{CirlHyper, DEFAULT_EPSILON};
use crate::error::{CirlError, Result};
use crate::expert::ExpertHyper;
use crate::oncosim::{fmt_real, RewardWeights, SimConfig};
use crate::rng::derive_seed;
use crate::train::{SupervisedHyper, TdHyper};

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSection {
    pub gamma: f64,
    pub true_weights: Vec<f64>,
    pub kappa: f64,
    pub replay_capacity: usize,
    pub td: TdHyper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfSection {
    pub mode: DynamicsMode,
    /// Fit the propensity model even when the overlap audit warns.
    pub force: bool,
    pub hyper: SupervisedHyper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CirlSection {
    pub epsilon: f64,
    pub max_iters: usize,
    pub policy: TdHyper,
    pub mu: TdHyper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    /// Rollouts per cumulative-reward estimate.
    pub rollouts: usize,
    /// Fresh expert trajectories for action matching.
    pub n_test: usize,
}

/// Full experiment description. Iteration counts are stored unscaled;
/// the `*_hyper` accessors apply `budget` and derive per-stage seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub budget: f64,
    pub output_dir: PathBuf,
    pub sim: SimConfig,
    pub expert: ExpertSection,
    pub n_trajectories: usize,
    pub cf: CfSection,
    pub cirl: CirlSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    /// The desk profile.
    fn default() -> Self {
        let td = |hidden_dim, batch_size, base: TdHyper| TdHyper {
            hidden_dim,
            batch_size,
            ..base
        };
        ExperimentConfig {
            seed: 0,
            budget: 0.25,
            output_dir: PathBuf::from("runs/desk"),
            sim: SimConfig::default(),
            expert: ExpertSection {
                gamma: 0.99,
                true_weights: vec![-0.3, -0.7],
                kappa: 5.0,
                replay_capacity: 10_000,
                td: td(32, 64, TdHyper::expert_defaults()),
            },
            n_trajectories: 2000,
            cf: CfSection {
                mode: DynamicsMode::IptwHistory,
                force: false,
                hyper: SupervisedHyper {
                    iterations: 4000,
                    ..SupervisedHyper::default()
                },
            },
            cirl: CirlSection {
                epsilon: DEFAULT_EPSILON,
                max_iters: 15,
                policy: td(32, 256, TdHyper::policy_defaults()),
                mu: td(32, 256, TdHyper::mu_defaults()),
            },
            eval: EvalSection {
                rollouts: 1000,
                n_test: 500,
            },
        }
    }
}

const TD_KEYS: [&str; 10] = [
    "hidden_dim",
    "batch_size",
    "learning_rate",
    "target_sync",
    "iterations",
    "epsilon_max",
    "epsilon_min",
    "epsilon_decay",
    "clip_norm",
    "log_every",
];

fn parse_real(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = v.parse().map_err(|_| format!("expected a real number, got `{v}`"))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("expected a finite number, got `{v}`"))
    }
}

fn parse_count(v: &str) -> std::result::Result<usize, String> {
    v.parse()
        .map_err(|_| format!("expected a non-negative integer, got `{v}`"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_clip(v: &str) -> std::result::Result<Option<f64>, String> {
    if v == "none" {
        Ok(None)
    } else {
        parse_real(v).map(Some)
    }
}

fn fmt_clip(c: Option<f64>) -> String {
    c.map_or_else(|| "none".to_string(), fmt_real)
}

fn set_td(h: &mut TdHyper, key: &str, v: &str) -> std::result::Result<bool, String> {
    match key {
        "hidden_dim" => h.hidden_dim = parse_count(v)?,
        "batch_size" => h.batch_size = parse_count(v)?,
        "learning_rate" => h.learning_rate = parse_real(v)?,
        "target_sync" => h.target_sync = parse_count(v)?,
        "iterations" => h.iterations = parse_count(v)?,
        "epsilon_max" => h.epsilon_max = parse_real(v)?,
        "epsilon_min" => h.epsilon_min = parse_real(v)?,
        "epsilon_decay" => h.epsilon_decay = parse_real(v)?,
        "clip_norm" => h.clip_norm = parse_clip(v)?,
        "log_every" => h.log_every = parse_count(v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn td_pairs(prefix: &str, h: &TdHyper, out: &mut Vec<(String, String)>) {
    let vals = [
        h.hidden_dim.to_string(),
        h.batch_size.to_string(),
        fmt_real(h.learning_rate),
        h.target_sync.to_string(),
        h.iterations.to_string(),
        fmt_real(h.epsilon_max),
        fmt_real(h.epsilon_min),
        fmt_real(h.epsilon_decay),
        fmt_clip(h.clip_norm),
        h.log_every.to_string(),
    ];
    for (k, v) in TD_KEYS.iter().zip(vals) {
        out.push((format!("{prefix}.{k}"), v));
    }
}

/// Where a setting came from, for error messages.
#[derive(Debug, Clone)]
struct Origin {
    name: String,
    line: usize,
}

impl Origin {
    fn error(&self, message: impl Into<String>) -> CirlError {
        CirlError::Config {
            origin: self.name.clone(),
            line: self.line,
            message: message.into(),
        }
    }
}

/// Ordered settings collected from a file and overrides; later wins.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    entries: BTreeMap<String, (String, Origin)>,
}

impl Settings {
    /// Parse config text. Duplicate keys within one file are rejected.
    pub fn parse(text: &str, origin: &str) -> Result<Settings> {
        let mut s = Settings::default();
        for (i, raw) in text.lines().enumerate() {
            let o = Origin {
                name: origin.to_string(),
                line: i + 1,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(o.error(format!("expected `key = value`, got `{line}`")));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(o.error("empty key"));
            }
            if s.entries.contains_key(k) {
                return Err(o.error(format!("duplicate key `{k}`")));
            }
            s.entries.insert(k.to_string(), (v.to_string(), o));
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path)?;
        Settings::parse(&text, &path.display().to_string())
    }

    /// Apply a command-line override; `position` is the argument index.
    pub fn set(&mut self, key: &str, value: &str, position: usize) {
        let o = Origin {
            name: "command line".into(),
            line: position,
        };
        self.entries.insert(key.to_string(), (value.to_string(), o));
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Build a config on top of the desk defaults.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::default();
        // Order first, so explicitly given drifts still win.
        if let Some((v, o)) = self.entries.get("sim.p") {
            let p = parse_count(v).map_err(|m| o.error(format!("sim.p: {m}")))?;
            let keep = c.sim.clone();
            c.sim = SimConfig {
                p,
                drift_x: SimConfig::with_order(p).drift_x,
                drift_z: SimConfig::with_order(p).drift_z,
                ..keep
            };
        }
        for (key, (v, o)) in &self.entries {
            if key == "sim.p" {
                continue;
            }
            c.apply(key, v).map_err(|m| o.error(format!("{key}: {m}")))?;
        }
        c.validate()?;
        Ok(c)
    }
}

impl ExperimentConfig {
    pub fn from_text(text: &str, origin: &str) -> Result<ExperimentConfig> {
        Settings::parse(text, origin)?.resolve()
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        Settings::load(path)?.resolve()
    }

    fn apply(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let known = match key.split_once('.') {
            None => match key {
                "seed" => {
                    self.seed = v
                        .parse()
                        .map_err(|_| format!("expected an unsigned integer, got `{v}`"))?;
                    true
                }
                "budget" => {
                    self.budget = parse_real(v)?;
                    true
                }
                "output_dir" => {
                    self.output_dir = PathBuf::from(v);
                    true
                }
                _ => false,
            },
            Some(("sim", k)) => self.sim.set(k, v).map_err(|e| e.to_string())?,
            Some(("expert", k)) => match k {
                "gamma" => {
                    self.expert.gamma = parse_real(v)?;
                    true
                }
                "true_weights" => {
                    self.expert.true_weights = v
                        .split(',')
                        .map(|s| parse_real(s.trim()))
                        .collect::<std::result::Result<_, _>>()?;
                    true
                }
                "kappa" => {
                    self.expert.kappa = if v == "inf" { f64::INFINITY } else { parse_real(v)? };
                    true
                }
                "replay_capacity" => {
                    self.expert.replay_capacity = parse_count(v)?;
                    true
                }
                _ => match k.strip_prefix("td.") {
                    Some(t) => set_td(&mut self.expert.td, t, v)?,
                    None => false,
                },
            },
            Some(("data", "n")) => {
                self.n_trajectories = parse_count(v)?;
                true
            }
            Some(("cf", k)) => {
                let h = &mut self.cf.hyper;
                match k {
                    "mode" => self.cf.mode = v.parse().map_err(|e: CirlError| e.to_string())?,
                    "force" => self.cf.force = parse_bool(v)?,
                    "hidden_dim" => h.hidden_dim = parse_count(v)?,
                    "batch_size" => h.batch_size = parse_count(v)?,
                    "learning_rate" => h.learning_rate = parse_real(v)?,
                    "iterations" => h.iterations = parse_count(v)?,
                    "clip_norm" => h.clip_norm = parse_clip(v)?,
                    _ => return Err("unknown key".into()),
                }
                true
            }
            Some(("cirl", k)) => match k {
                "epsilon" => {
                    self.cirl.epsilon = parse_real(v)?;
                    true
                }
                "max_iters" => {
                    self.cirl.max_iters = parse_count(v)?;
                    true
                }
                _ => match k.split_once('.') {
                    Some(("policy", t)) => set_td(&mut self.cirl.policy, t, v)?,
                    Some(("mu", t)) => set_td(&mut self.cirl.mu, t, v)?,
                    _ => false,
                },
            },
            Some(("eval", "rollouts")) => {
                self.eval.rollouts = parse_count(v)?;
                true
            }
            Some(("eval", "n_test")) => {
                self.eval.n_test = parse_count(v)?;
                true
            }
            _ => false,
        };
        if known {
            Ok(())
        } else {
            Err("unknown key".into())
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CirlError::invalid(m.to_string()));
        if !(self.budget > 0.0) {
            return bad("budget must be positive");
        }
        if !(0.0..1.0).contains(&self.expert.gamma) {
            return bad("expert.gamma must lie in [0, 1)");
        }
        if !(self.cirl.epsilon > 0.0) {
            return bad("cirl.epsilon must be positive");
        }
        if self.n_trajectories == 0 || self.eval.rollouts == 0 || self.eval.n_test == 0 {
            return bad("data.n, eval.rollouts and eval.n_test must be >= 1");
        }
        if self.cf.hyper.hidden_dim == 0 || self.cf.hyper.batch_size == 0 {
            return bad("cf.hidden_dim and cf.batch_size must be >= 1");
        }
        self.sim.validate()?;
        RewardWeights::new(self.expert.true_weights.clone(), self.expert.gamma)?;
        self.expert.td.validate()?;
        self.cirl.policy.validate()?;
        self.cirl.mu.validate()
    }

    /// Every key with its value, in file order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("seed".to_string(), self.seed.to_string()),
            ("budget".to_string(), fmt_real(self.budget)),
            ("output_dir".to_string(), self.output_dir.display().to_string()),
        ];
        for (k, v) in self.sim.to_pairs() {
            out.push((format!("sim.{k}"), v));
        }
        let e = &self.expert;
        out.push(("expert.gamma".into(), fmt_real(e.gamma)));
        out.push((
            "expert.true_weights".into(),
            e.true_weights
                .iter()
                .map(|w| fmt_real(*w))
                .collect::<Vec<_>>()
                .join(","),
        ));
        out.push((
            "expert.kappa".into(),
            if e.kappa.is_infinite() {
                "inf".into()
            } else {
                fmt_real(e.kappa)
            },
        ));
        out.push(("expert.replay_capacity".into(), e.replay_capacity.to_string()));
        td_pairs("expert.td", &e.td, &mut out);
        out.push(("data.n".into(), self.n_trajectories.to_string()));
        let h = &self.cf.hyper;
        out.push(("cf.mode".into(), self.cf.mode.cli_name().into()));
        out.push(("cf.force".into(), self.cf.force.to_string()));
        out.push(("cf.hidden_dim".into(), h.hidden_dim.to_string()));
        out.push(("cf.batch_size".into(), h.batch_size.to_string()));
        out.push(("cf.learning_rate".into(), fmt_real(h.learning_rate)));
        out.push(("cf.iterations".into(), h.iterations.to_string()));
        out.push(("cf.clip_norm".into(), fmt_clip(h.clip_norm)));
        out.push(("cirl.epsilon".into(), fmt_real(self.cirl.epsilon)));
        out.push(("cirl.max_iters".into(), self.cirl.max_iters.to_string()));
        td_pairs("cirl.policy", &self.cirl.policy, &mut out);
        td_pairs("cirl.mu", &self.cirl.mu, &mut out);
        out.push(("eval.rollouts".into(), self.eval.rollouts.to_string()));
        out.push(("eval.n_test".into(), self.eval.n_test.to_string()));
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn true_weights(&self) -> Result<RewardWeights> {
        RewardWeights::new(self.expert.true_weights.clone(), self.expert.gamma)
    }

    pub fn expert_hyper(&self) -> ExpertHyper {
        ExpertHyper {
            td: TdHyper {
                seed: derive_seed(self.seed, "expert"),
                ..self.expert.td.with_budget(self.budget)
            },
            replay_capacity: self.expert.replay_capacity,
        }
    }

    pub fn dataset_seed(&self) -> u64 {
        derive_seed(self.seed, "data")
    }

    pub fn supervised_hyper(&self, stage: &str) -> SupervisedHyper {
        SupervisedHyper {
            seed: derive_seed(self.seed, stage),
            ..self.cf.hyper.with_budget(self.budget)
        }
    }

    pub fn cirl_hyper(&self) -> CirlHyper {
        CirlHyper {
            epsilon: self.cirl.epsilon,
            max_iters: self.cirl.max_iters,
            policy: self.cirl.policy.with_budget(self.budget),
            mu: self.cirl.mu.with_budget(self.budget),
            seed: derive_seed(self.seed, "cirl"),
        }
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, "eval")
    }
}
