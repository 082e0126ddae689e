//! Pipeline stages. Each stage reads its inputs from the experiment
//! directory, writes its artifacts there, and records a manifest with input
//! and output hashes, the seed and the wall time.
//!
//! ```text
//! <output_dir>/config.cfg
//! expert/   q_network.txt curve.csv
//! data/     cohort.tsv
//! audit/    audit.txt action_frequencies.csv
//! cf/       propensity.txt dynamics.txt metrics.csv
//! cirl/     iterations.csv mixing.csv policy_<k>.txt mu_<k>.csv
//! eval/     policy_quality.csv weights.csv
//! report/   weights.svg margins.svg summary.txt
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use sha2::{Digest, Sha256};

use crate::cfmodel::{
    self, counterfactual_rmse, factual_rmse, DynamicsMode, DynamicsModel, FeatureMap, SimulatorModel,
    VALIDATION_FRACTION,
};
use crate::cirl::{self, MixingPolicy};
use crate::cohort::{self, BatchDataset};
use crate::config::ExperimentConfig;
use crate::error::{CirlError, Result};
use crate::evalreport::{self, PolicyRow, WeightRow};
use crate::expert::{self, ExpertPolicy};
use crate::mulearn;
use crate::oncosim::{fmt_real, RewardWeights};
use crate::policy::{Policy, QNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    TrainExpert,
    GenData,
    Audit,
    TrainCf,
    RunCirl,
    Evaluate,
    Report,
}

impl Stage {
    /// Subcommand name.
    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainExpert => "train-expert",
            Stage::GenData => "gen-data",
            Stage::Audit => "audit",
            Stage::TrainCf => "train-cf",
            Stage::RunCirl => "run-cirl",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    fn dir(self) -> &'static str {
        match self {
            Stage::TrainExpert => "expert",
            Stage::GenData => "data",
            Stage::Audit => "audit",
            Stage::TrainCf => "cf",
            Stage::RunCirl => "cirl",
            Stage::Evaluate => "eval",
            Stage::Report => "report",
        }
    }
}

/// Paths of one experiment directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.dir())
    }

    pub fn artifact(&self, stage: Stage, file: &str) -> PathBuf {
        self.stage_dir(stage).join(file)
    }

    pub fn expert_q(&self) -> PathBuf {
        self.artifact(Stage::TrainExpert, "q_network.txt")
    }

    pub fn cohort(&self) -> PathBuf {
        self.artifact(Stage::GenData, "cohort.tsv")
    }

    pub fn dynamics(&self) -> PathBuf {
        self.artifact(Stage::TrainCf, "dynamics.txt")
    }

    pub fn iterations(&self) -> PathBuf {
        self.artifact(Stage::RunCirl, "iterations.csv")
    }

    pub fn mixing(&self) -> PathBuf {
        self.artifact(Stage::RunCirl, "mixing.csv")
    }

    pub fn policy(&self, k: usize) -> PathBuf {
        self.artifact(Stage::RunCirl, &format!("policy_{k}.txt"))
    }

    pub fn policy_quality(&self) -> PathBuf {
        self.artifact(Stage::Evaluate, "policy_quality.csv")
    }

    pub fn weights(&self) -> PathBuf {
        self.artifact(Stage::Evaluate, "weights.csv")
    }
}

/// Fail with the producing subcommand if `path` is absent.
pub fn require(path: &Path, producer: Stage) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CirlError::MissingArtifact {
            path: path.to_path_buf(),
            producer: producer.name(),
        })
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

struct Run<'a> {
    stage: Stage,
    cfg: &'a ExperimentConfig,
    layout: Layout,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl<'a> Run<'a> {
    fn start(stage: Stage, cfg: &'a ExperimentConfig) -> Result<Self> {
        let layout = Layout::new(&cfg.output_dir);
        fs::create_dir_all(layout.stage_dir(stage))?;
        fs::write(layout.root.join("config.cfg"), cfg.to_text())?;
        info!("{}: starting", stage.name());
        Ok(Run {
            stage,
            cfg,
            layout,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn input(&mut self, path: PathBuf, producer: Stage) -> Result<PathBuf> {
        require(&path, producer)?;
        self.inputs.push(path.clone());
        Ok(path)
    }

    fn output(&mut self, file: &str) -> PathBuf {
        let p = self.layout.artifact(self.stage, file);
        self.outputs.push(p.clone());
        p
    }

    fn finish(self) -> Result<()> {
        let elapsed = self.started.elapsed().as_secs_f64();
        let rel = |p: &Path| p.strip_prefix(&self.layout.root).unwrap_or(p).display().to_string();
        let mut m = String::new();
        let _ = writeln!(m, "stage = {}", self.stage.name());
        let _ = writeln!(m, "seed = {}", self.cfg.seed);
        let _ = writeln!(m, "budget = {}", fmt_real(self.cfg.budget));
        let _ = writeln!(m, "config_sha256 = {:x}", Sha256::digest(self.cfg.to_text().as_bytes()));
        for p in &self.inputs {
            let _ = writeln!(m, "input {} = {}", rel(p), sha256_file(p)?);
        }
        for p in &self.outputs {
            let _ = writeln!(m, "output {} = {}", rel(p), sha256_file(p)?);
        }
        let _ = writeln!(m, "elapsed_seconds = {elapsed:.3}");
        fs::write(self.layout.artifact(self.stage, "manifest.txt"), m)?;
        info!("{}: done in {elapsed:.1}s", self.stage.name());
        Ok(())
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn load_expert(cfg: &ExperimentConfig, path: &Path) -> Result<(QNetwork, ExpertPolicy)> {
    let q = QNetwork::load(path, &cfg.sim)?;
    let logging = expert::logging_policy(q.clone(), cfg.expert.kappa)?;
    Ok((q, logging))
}

pub fn train_expert(cfg: &ExperimentConfig) -> Result<()> {
    let mut run = Run::start(Stage::TrainExpert, cfg)?;
    let out = expert::train_expert(&cfg.sim, &cfg.true_weights()?, &cfg.expert_hyper())?;
    crate::seqnet::save_params(&out.q_net, &run.output("q_network.txt"))?;
    let mut w = create(&run.output("curve.csv"))?;
    writeln!(w, "iteration,epsilon,td_loss,episode_return,episodes")?;
    for c in &out.curve {
        writeln!(
            w,
            "{},{},{},{},{}",
            c.iteration,
            fmt_real(c.epsilon),
            fmt_real(c.td_loss),
            fmt_real(c.episode_return),
            c.episodes
        )?;
    }
    w.flush()?;
    drop(w);
    run.finish()
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let mut run = Run::start(Stage::GenData, cfg)?;
    let q_path = run.input(run.layout.expert_q(), Stage::TrainExpert)?;
    let (_, logging) = load_expert(cfg, &q_path)?;
    let data = cohort::generate(&logging, &cfg.sim, cfg.n_trajectories, cfg.dataset_seed())?;
    cohort::save(&data, &run.output("cohort.tsv"))?;
    run.finish()
}

fn load_cohort(run: &mut Run<'_>) -> Result<BatchDataset> {
    let path = run.input(run.layout.cohort(), Stage::GenData)?;
    cohort::load(&path)
}

pub fn audit(cfg: &ExperimentConfig) -> Result<cohort::AuditReport> {
    let mut run = Run::start(Stage::Audit, cfg)?;
    let data = load_cohort(&mut run)?;
    let report = cohort::audit(&data);
    fs::write(run.output("audit.txt"), report.to_string())?;
    let mut w = create(&run.output("action_frequencies.csv"))?;
    writeln!(w, "t,n,n_treat,treat_frequency")?;
    for (t, c) in report.action_counts.iter().enumerate() {
        writeln!(
            w,
            "{t},{},{},{}",
            c[0] + c[1],
            c[1],
            fmt_real(report.action_frequency(t)[1])
        )?;
    }
    w.flush()?;
    drop(w);
    run.finish()?;
    Ok(report)
}

/// Held-out diagnostics of the fitted models.
#[derive(Debug, Clone, PartialEq)]
pub struct CfMetrics {
    pub propensity_log_loss: f64,
    pub constant_log_loss: f64,
    pub factual_rmse: f64,
    pub counterfactual_rmse: f64,
}

pub fn train_cf(cfg: &ExperimentConfig) -> Result<CfMetrics> {
    let mut run = Run::start(Stage::TrainCf, cfg)?;
    let data = load_cohort(&mut run)?;
    let hyper = cfg.supervised_hyper("cf");
    let propensity = cfmodel::fit_propensity(&data, &hyper, cfg.cf.force)?;
    let dynamics = cfmodel::fit_dynamics(
        &data,
        (cfg.cf.mode == DynamicsMode::IptwHistory).then_some(&propensity),
        cfg.cf.mode,
        &hyper,
    )?;
    propensity.save(&run.output("propensity.txt"))?;
    dynamics.save(&run.output("dynamics.txt"))?;
    let (_, held_out) = data.split(1.0 - VALIDATION_FRACTION, hyper.seed);
    let metrics = CfMetrics {
        propensity_log_loss: propensity.log_loss(&held_out),
        constant_log_loss: std::f64::consts::LN_2,
        factual_rmse: factual_rmse(&dynamics, &held_out),
        counterfactual_rmse: counterfactual_rmse(&dynamics, &SimulatorModel::exact(&cfg.sim), &held_out),
    };
    let mut w = create(&run.output("metrics.csv"))?;
    writeln!(w, "metric,value")?;
    writeln!(w, "propensity_log_loss,{}", fmt_real(metrics.propensity_log_loss))?;
    writeln!(w, "constant_log_loss,{}", fmt_real(metrics.constant_log_loss))?;
    writeln!(w, "factual_rmse,{}", fmt_real(metrics.factual_rmse))?;
    writeln!(w, "counterfactual_rmse,{}", fmt_real(metrics.counterfactual_rmse))?;
    w.flush()?;
    drop(w);
    run.finish()?;
    Ok(metrics)
}

pub fn run_cirl(cfg: &ExperimentConfig) -> Result<cirl::CirlResult> {
    let mut run = Run::start(Stage::RunCirl, cfg)?;
    let dyn_path = run.input(run.layout.dynamics(), Stage::TrainCf)?;
    let data = load_cohort(&mut run)?;
    let dynamics = DynamicsModel::load(&dyn_path, &cfg.sim)?;
    let fmap = FeatureMap::from_dynamics(dynamics, &cfg.sim);
    let result = cirl::run_cirl(&data, &fmap, cfg.expert.gamma, &cfg.cirl_hyper())?;
    let mut w = create(&run.output("iterations.csv"))?;
    cirl::write_iterations_csv(&result.run, &mut w)?;
    w.flush()?;
    drop(w);
    let mut w = create(&run.output("mixing.csv"))?;
    writeln!(w, "k,lambda")?;
    for (k, l) in result.mixing.lambdas.iter().enumerate() {
        writeln!(w, "{k},{}", fmt_real(*l))?;
    }
    w.flush()?;
    drop(w);
    for (k, p) in result.run.state.policies.iter().enumerate() {
        p.save(&run.output(&format!("policy_{k}.txt")))?;
    }
    for (k, log) in result.mu_logs.iter().enumerate() {
        let mut w = create(&run.output(&format!("mu_{k}.csv")))?;
        mulearn::write_convergence_csv(log, &mut w)?;
        w.flush()?;
    }
    fs::write(
        run.output("status.txt"),
        format!(
            "status = {}\nselected = {}\nweights = {}\n",
            result.run.status.as_str(),
            result.run.selected,
            result
                .selected_weights
                .w
                .iter()
                .map(|v| fmt_real(*v))
                .collect::<Vec<_>>()
                .join(",")
        ),
    )?;
    run.finish()?;
    Ok(result)
}

/// Column `name` of a CSV written by this crate (no quoting).
pub fn read_csv_column(path: &Path, name: &str) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    let src = path.display().to_string();
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| CirlError::parse(&src, 1, "empty file"))?;
    let idx = header
        .split(',')
        .position(|h| h == name)
        .ok_or_else(|| CirlError::parse(&src, 1, format!("no column `{name}`")))?;
    lines
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .nth(idx)
                .map(str::to_string)
                .ok_or_else(|| CirlError::parse(&src, i + 2, "short row"))
        })
        .collect()
}

fn parse_reals(path: &Path, col: &[String]) -> Result<Vec<f64>> {
    col.iter()
        .enumerate()
        .map(|(i, s)| {
            if s.is_empty() {
                Ok(f64::NAN)
            } else {
                s.parse()
                    .map_err(|_| CirlError::parse(path.display().to_string(), i + 2, format!("bad number `{s}`")))
            }
        })
        .collect()
}

/// The evaluated outputs of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<PolicyRow>,
    pub weights: WeightRow,
}

impl Evaluation {
    pub fn row(&self, method: &str) -> Option<&PolicyRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

pub fn evaluate(cfg: &ExperimentConfig) -> Result<Evaluation> {
    let mut run = Run::start(Stage::Evaluate, cfg)?;
    let q_path = run.input(run.layout.expert_q(), Stage::TrainExpert)?;
    let it_path = run.input(run.layout.iterations(), Stage::RunCirl)?;
    let mix_path = run.input(run.layout.mixing(), Stage::RunCirl)?;
    let (greedy, logging) = load_expert(cfg, &q_path)?;
    let selected_col = read_csv_column(&it_path, "selected")?;
    let selected = selected_col
        .iter()
        .position(|s| s == "1")
        .ok_or_else(|| CirlError::parse(it_path.display().to_string(), 0, "no selected iteration"))?;
    let mut policies = Vec::new();
    for k in 0..selected_col.len() {
        let p = run.input(run.layout.policy(k), Stage::RunCirl)?;
        policies.push(QNetwork::load(&p, &cfg.sim)?);
    }
    let lambdas = parse_reals(&mix_path, &read_csv_column(&mix_path, "lambda")?)?;
    let w_sel: Vec<f64> = (1..=2)
        .map(|j| parse_reals(&it_path, &read_csv_column(&it_path, &format!("w_l1_{j}"))?).map(|c| c[selected]))
        .collect::<Result<_>>()?;
    let truth = cfg.true_weights()?;
    let gamma = cfg.expert.gamma;
    let seed = cfg.eval_seed();
    let (m, n_test) = (cfg.eval.rollouts, cfg.eval.n_test);
    let test = cohort::generate(&logging, &cfg.sim, n_test, crate::rng::derive_seed(seed, "test"))?;
    let mut rows = Vec::new();
    let mut eval_policy = |method: &str, p: &dyn Policy, with_acc: bool| -> Result<()> {
        rows.push(PolicyRow {
            method: method.to_string(),
            reward: evalreport::cumulative_reward(p, &cfg.sim, &truth, gamma, m, seed)?,
            accuracy: with_acc.then(|| evalreport::action_match_accuracy_on(p, &test, seed)),
        });
        Ok(())
    };
    eval_policy("expert", &greedy, true)?;
    eval_policy("logging", &logging, true)?;
    eval_policy("cirl", &policies[selected], true)?;
    let mixing = MixingPolicy {
        lambdas,
        achieved_mu: Vec::new(),
        distance: f64::NAN,
    };
    let refs: Vec<&dyn Policy> = policies.iter().map(|p| p as &dyn Policy).collect();
    rows.push(PolicyRow {
        method: "cirl_mixture".into(),
        reward: evalreport::cumulative_reward_mixture(&mixing, &refs, &cfg.sim, &truth, gamma, m, seed)?,
        accuracy: None,
    });
    let weights = WeightRow {
        label: format!("seed {}", cfg.seed),
        comparison: evalreport::weight_report(&RewardWeights::unnormalized(w_sel, gamma)?, &truth),
    };
    let mut w = create(&run.output("policy_quality.csv"))?;
    evalreport::write_policy_table(&rows, &mut w)?;
    w.flush()?;
    drop(w);
    let mut w = create(&run.output("weights.csv"))?;
    evalreport::write_weight_table(std::slice::from_ref(&weights), &mut w)?;
    w.flush()?;
    drop(w);
    run.finish()?;
    Ok(Evaluation { rows, weights })
}

pub fn report(cfg: &ExperimentConfig) -> Result<String> {
    let mut run = Run::start(Stage::Report, cfg)?;
    let it_path = run.input(run.layout.iterations(), Stage::RunCirl)?;
    let q_path = run.input(run.layout.policy_quality(), Stage::Evaluate)?;
    let w_path = run.input(run.layout.weights(), Stage::Evaluate)?;
    let margins: Vec<f64> = parse_reals(&it_path, &read_csv_column(&it_path, "margin")?)?
        .into_iter()
        .skip(1)
        .collect();
    let col = |name: &str| -> Result<Vec<f64>> { parse_reals(&w_path, &read_csv_column(&w_path, name)?) };
    let labels = read_csv_column(&w_path, "label")?;
    let (w1, w2, t1, t2) = (col("w_1")?, col("w_2")?, col("true_w_1")?, col("true_w_2")?);
    let truth = RewardWeights::unnormalized(vec![t1[0], t2[0]], cfg.expert.gamma)?;
    let rows: Vec<WeightRow> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            Ok(WeightRow {
                label: l.clone(),
                comparison: evalreport::weight_report(
                    &RewardWeights::unnormalized(vec![w1[i], w2[i]], cfg.expert.gamma)?,
                    &truth,
                ),
            })
        })
        .collect::<Result<_>>()?;
    fs::write(run.output("weights.svg"), evalreport::weights_svg(&rows))?;
    fs::write(
        run.output("margins.svg"),
        evalreport::margins_svg(&[(format!("seed {}", cfg.seed), margins)]),
    )?;
    let methods = read_csv_column(&q_path, "method")?;
    let rmean = parse_reals(&q_path, &read_csv_column(&q_path, "reward_mean")?)?;
    let rse = parse_reals(&q_path, &read_csv_column(&q_path, "reward_stderr")?)?;
    let amean = parse_reals(&q_path, &read_csv_column(&q_path, "accuracy_mean")?)?;
    let mut s = String::new();
    let _ = writeln!(s, "method          reward              accuracy");
    for i in 0..methods.len() {
        let acc = if amean[i].is_nan() {
            "-".to_string()
        } else {
            format!("{:.3}", amean[i])
        };
        let _ = writeln!(s, "{:<15} {:>8.4} +- {:<7.4} {acc}", methods[i], rmean[i], rse[i]);
    }
    for r in &rows {
        let c = &r.comparison;
        let _ = writeln!(
            s,
            "{}: w = ({:.3}, {:.3}), true ({:.3}, {:.3}), signs {}, ordering {}, l1 distance {:.3}",
            r.label,
            c.recovered[0],
            c.recovered[1],
            c.truth[0],
            c.truth[1],
            if c.signs_agree() { "agree" } else { "differ" },
            if c.ordering_agreement { "agrees" } else { "differs" },
            c.l1_distance
        );
    }
    fs::write(run.output("summary.txt"), &s)?;
    run.finish()?;
    Ok(s)
}

/// All stages in order.
pub fn pipeline(cfg: &ExperimentConfig) -> Result<String> {
    train_expert(cfg)?;
    gen_data(cfg)?;
    let a = audit(cfg)?;
    if a.has_overlap_warnings() {
        log::warn!("overlap warnings in the logged cohort; see audit/audit.txt");
    }
    train_cf(cfg)?;
    run_cirl(cfg)?;
    evaluate(cfg)?;
    report(cfg)
}
