//! Logged batch datasets: generation under a logging policy, a line-oriented
//! text format, and overlap diagnostics.
//!
//! File layout (UTF-8, tab separated):
//!
//! ```text
//! cirl-cohort v1  trajectories=N  seed=S  fingerprint=HEX  sim.p=5 ...
//! <id>  <termination>  <x0>,<z0>;<x1>,<z1>;...  <a0><a1>...
//! ```
//!
//! Reals are written with 17 significant digits.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{CirlError, Result};
use crate::expert::ExpertPolicy;
use crate::history::History;
use crate::oncosim::{self, fmt_real, SimConfig, TerminationReason};
use crate::policy::Policy;
use crate::rng::stream;

pub const COHORT_MAGIC: &str = "cirl-cohort";
pub const COHORT_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: u64,
    /// Covariates `x_0..=x_T` and actions `a_0..a_T`.
    pub history: History,
    pub termination: TerminationReason,
}

impl Trajectory {
    /// Number of actions `T`.
    pub fn len(&self) -> usize {
        self.history.t()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn covariates(&self) -> &[[f64; 2]] {
        &self.history.covariates
    }

    pub fn actions(&self) -> &[u8] {
        &self.history.actions
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchDataset {
    pub trajectories: Vec<Trajectory>,
    pub sim_config: SimConfig,
    pub policy_fingerprint: String,
    pub master_seed: u64,
}

impl BatchDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Total number of logged `(h_t, a_t)` pairs.
    pub fn transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Split by trajectory: the first `ceil(fraction * N)` trajectories of a
    /// seeded permutation go to the first part.
    pub fn split(&self, fraction: f64, seed: u64) -> (BatchDataset, BatchDataset) {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut stream(seed, 0x5_1117));
        let cut = ((fraction * self.len() as f64).ceil() as usize).min(self.len());
        let pick = |ids: &[usize]| BatchDataset {
            trajectories: ids.iter().map(|&i| self.trajectories[i].clone()).collect(),
            ..self.header_only()
        };
        (pick(&idx[..cut]), pick(&idx[cut..]))
    }

    fn header_only(&self) -> BatchDataset {
        BatchDataset {
            trajectories: Vec::new(),
            sim_config: self.sim_config.clone(),
            policy_fingerprint: self.policy_fingerprint.clone(),
            master_seed: self.master_seed,
        }
    }

    /// Check the dataset invariants.
    pub fn validate(&self) -> Result<()> {
        if self.trajectories.is_empty() {
            return Err(CirlError::Validation("dataset holds no trajectories".into()));
        }
        let c = &self.sim_config;
        for tr in &self.trajectories {
            let t = tr.len();
            if t == 0 || t > c.max_horizon || tr.covariates().len() != t + 1 {
                return Err(CirlError::Validation(format!(
                    "trajectory {}: {} actions for {} covariate rows",
                    tr.id,
                    t,
                    tr.covariates().len()
                )));
            }
            for &[x, z] in tr.covariates() {
                if !(0.0..=c.x_max).contains(&x) || !(0.0..=c.z_max).contains(&z) {
                    return Err(CirlError::Validation(format!(
                        "trajectory {}: covariates ({x}, {z}) out of bounds",
                        tr.id
                    )));
                }
            }
            if tr.actions().iter().any(|&a| a > 1) {
                return Err(CirlError::Validation(format!(
                    "trajectory {}: action not in {{0, 1}}",
                    tr.id
                )));
            }
        }
        Ok(())
    }
}

/// Simulate one trajectory under `policy` with the stream `(master_seed, index)`.
pub fn simulate_trajectory(
    policy: &dyn Policy,
    config: &SimConfig,
    master_seed: u64,
    index: u64,
) -> Result<Trajectory> {
    let mut rng = stream(master_seed, index);
    let mut state = oncosim::reset(config, &mut rng);
    let mut history = History::initial(state.x(), state.z());
    while !state.terminated() {
        let a = policy.act(&history, &mut rng);
        let (next, x, z) = oncosim::step(config, &state, a, &mut rng)?;
        history.push(a, [x, z]);
        state = next;
    }
    Ok(Trajectory {
        id: index,
        history,
        termination: state.termination.expect("loop exits on termination"),
    })
}

/// Log `n` trajectories from the expert's stochastic policy.
pub fn generate(policy: &ExpertPolicy, config: &SimConfig, n: usize, master_seed: u64) -> Result<BatchDataset> {
    generate_with(policy, &policy.fingerprint(), config, n, master_seed)
}

/// [`generate`] for an arbitrary policy with a caller-supplied fingerprint.
pub fn generate_with(
    policy: &dyn Policy,
    fingerprint: &str,
    config: &SimConfig,
    n: usize,
    master_seed: u64,
) -> Result<BatchDataset> {
    if n == 0 {
        return Err(CirlError::invalid("dataset size must be >= 1"));
    }
    config.validate()?;
    let trajectories = (0..n as u64)
        .into_par_iter()
        .map(|i| simulate_trajectory(policy, config, master_seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchDataset {
        trajectories,
        sim_config: config.clone(),
        policy_fingerprint: fingerprint.to_string(),
        master_seed,
    })
}

pub fn write_dataset<W: Write>(dataset: &BatchDataset, out: W) -> Result<()> {
    let mut w = BufWriter::new(out);
    write!(
        w,
        "{COHORT_MAGIC} {COHORT_VERSION}\ttrajectories={}\tseed={}\tfingerprint={}",
        dataset.len(),
        dataset.master_seed,
        dataset.policy_fingerprint
    )?;
    for (k, v) in dataset.sim_config.to_pairs() {
        write!(w, "\tsim.{k}={v}")?;
    }
    writeln!(w)?;
    let mut line = String::new();
    for tr in &dataset.trajectories {
        line.clear();
        line.push_str(&tr.id.to_string());
        line.push('\t');
        line.push_str(tr.termination.as_str());
        line.push('\t');
        for (k, [x, z]) in tr.covariates().iter().enumerate() {
            if k > 0 {
                line.push(';');
            }
            line.push_str(&fmt_real(*x));
            line.push(',');
            line.push_str(&fmt_real(*z));
        }
        line.push('\t');
        line.extend(tr.actions().iter().map(|&a| if a == 1 { '1' } else { '0' }));
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(input: R, source_name: &str) -> Result<BatchDataset> {
    let reader = BufReader::new(input);
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(l) => l?,
        None => return Err(CirlError::parse(source_name, 1, "empty file")),
    };
    let mut fields = header.split('\t');
    let magic = fields.next().unwrap_or_default();
    let version = match magic.split_once(' ') {
        Some((m, v)) if m == COHORT_MAGIC => v,
        _ => {
            return Err(CirlError::parse(
                source_name,
                1,
                format!("expected `{COHORT_MAGIC}` header"),
            ))
        }
    };
    if version != COHORT_VERSION {
        return Err(CirlError::FormatVersion {
            found: format!("{COHORT_MAGIC} {version}"),
            expected: format!("{COHORT_MAGIC} {COHORT_VERSION}"),
        });
    }
    let mut count = None;
    let mut seed = None;
    let mut fingerprint = None;
    let mut sim = SimConfig::default();
    for f in fields {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| CirlError::parse(source_name, 1, format!("header field `{f}` is not key=value")))?;
        let bad = |what: &str| CirlError::parse(source_name, 1, format!("bad {what} `{v}`"));
        match k {
            "trajectories" => count = Some(v.parse::<usize>().map_err(|_| bad("trajectory count"))?),
            "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad("seed"))?),
            "fingerprint" => fingerprint = Some(v.to_string()),
            _ => match k.strip_prefix("sim.") {
                Some(key) => {
                    let known = sim
                        .set(key, v)
                        .map_err(|e| CirlError::parse(source_name, 1, e.to_string()))?;
                    if !known {
                        return Err(CirlError::parse(source_name, 1, format!("unknown key `{k}`")));
                    }
                }
                None => return Err(CirlError::parse(source_name, 1, format!("unknown key `{k}`"))),
            },
        }
    }
    let missing = |what| CirlError::parse(source_name, 1, format!("header lacks `{what}`"));
    let count = count.ok_or_else(|| missing("trajectories"))?;
    let master_seed = seed.ok_or_else(|| missing("seed"))?;
    let policy_fingerprint = fingerprint.ok_or_else(|| missing("fingerprint"))?;

    let mut trajectories = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        trajectories.push(parse_record(&line, source_name, lineno)?);
    }
    if trajectories.len() != count {
        return Err(CirlError::parse(
            source_name,
            trajectories.len() + 2,
            format!("header announces {count} trajectories, found {}", trajectories.len()),
        ));
    }
    let dataset = BatchDataset {
        trajectories,
        sim_config: sim,
        policy_fingerprint,
        master_seed,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn parse_record(line: &str, source_name: &str, lineno: usize) -> Result<Trajectory> {
    let err = |msg: String| CirlError::parse(source_name, lineno, msg);
    let parts: Vec<&str> = line.split('\t').collect();
    if parts.len() != 4 {
        return Err(err(format!("expected 4 fields, found {}", parts.len())));
    }
    let id = parts[0].parse().map_err(|_| err(format!("bad id `{}`", parts[0])))?;
    let termination = parts[1].parse().map_err(err)?;
    let covariates = parts[2]
        .split(';')
        .map(|pair| {
            let (x, z) = pair
                .split_once(',')
                .ok_or_else(|| err(format!("bad covariate pair `{pair}`")))?;
            let x: f64 = x.parse().map_err(|_| err(format!("bad real `{x}`")))?;
            let z: f64 = z.parse().map_err(|_| err(format!("bad real `{z}`")))?;
            Ok([x, z])
        })
        .collect::<Result<Vec<_>>>()?;
    let actions = parts[3]
        .chars()
        .map(|c| match c {
            '0' => Ok(0u8),
            '1' => Ok(1u8),
            _ => Err(err(format!("bad action `{c}`"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if covariates.len() != actions.len() + 1 {
        return Err(err(format!(
            "{} covariate rows for {} actions",
            covariates.len(),
            actions.len()
        )));
    }
    Ok(Trajectory {
        id,
        history: History { covariates, actions },
        termination,
    })
}

pub fn save(dataset: &BatchDataset, path: &Path) -> Result<()> {
    write_dataset(dataset, File::create(path)?)
}

pub fn load(path: &Path) -> Result<BatchDataset> {
    read_dataset(File::open(path)?, &path.display().to_string())
}

pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapWarning {
    pub t: usize,
    pub action: u8,
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub trajectories: usize,
    /// `[count(a=0), count(a=1)]` at each timestep index.
    pub action_counts: Vec<[usize; 2]>,
    /// Index `T` holds the number of trajectories with `T` actions.
    pub length_histogram: Vec<usize>,
    pub termination_counts: Vec<(TerminationReason, usize)>,
    pub x_range: (f64, f64),
    pub z_range: (f64, f64),
    pub threshold: f64,
    pub warnings: Vec<OverlapWarning>,
}

impl AuditReport {
    pub fn action_frequency(&self, t: usize) -> [f64; 2] {
        let [n0, n1] = self.action_counts[t];
        let n = (n0 + n1) as f64;
        [n0 as f64 / n, n1 as f64 / n]
    }

    pub fn pooled_treat_frequency(&self) -> f64 {
        let (n1, n) = self
            .action_counts
            .iter()
            .fold((0, 0), |(a, b), c| (a + c[1], b + c[0] + c[1]));
        n1 as f64 / n as f64
    }

    pub fn has_overlap_warnings(&self) -> bool {
        !self.warnings.is_empty()
    }
}

pub fn audit(dataset: &BatchDataset) -> AuditReport {
    audit_with_threshold(dataset, DEFAULT_OVERLAP_THRESHOLD)
}

pub fn audit_with_threshold(dataset: &BatchDataset, threshold: f64) -> AuditReport {
    let horizon = dataset
        .trajectories
        .iter()
        .map(Trajectory::len)
        .max()
        .unwrap_or(0)
        .max(dataset.sim_config.max_horizon);
    let mut action_counts = vec![[0usize; 2]; horizon];
    let mut length_histogram = vec![0usize; horizon + 1];
    let mut term = vec![0usize; TerminationReason::ALL.len()];
    let mut x_range = (f64::INFINITY, f64::NEG_INFINITY);
    let mut z_range = (f64::INFINITY, f64::NEG_INFINITY);
    for tr in &dataset.trajectories {
        length_histogram[tr.len()] += 1;
        let k = TerminationReason::ALL
            .iter()
            .position(|r| *r == tr.termination)
            .unwrap();
        term[k] += 1;
        for (t, &a) in tr.actions().iter().enumerate() {
            action_counts[t][a as usize] += 1;
        }
        for &[x, z] in tr.covariates() {
            x_range = (x_range.0.min(x), x_range.1.max(x));
            z_range = (z_range.0.min(z), z_range.1.max(z));
        }
    }
    while action_counts.last() == Some(&[0, 0]) {
        action_counts.pop();
    }
    let mut warnings = Vec::new();
    for (t, c) in action_counts.iter().enumerate() {
        let n = (c[0] + c[1]) as f64;
        for a in 0..2u8 {
            let f = c[a as usize] as f64 / n;
            if f < threshold {
                warnings.push(OverlapWarning {
                    t,
                    action: a,
                    frequency: f,
                });
            }
        }
    }
    AuditReport {
        trajectories: dataset.len(),
        action_counts,
        length_histogram,
        termination_counts: TerminationReason::ALL.iter().copied().zip(term).collect(),
        x_range,
        z_range,
        threshold,
        warnings,
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "trajectories: {}", self.trajectories)?;
        writeln!(f, "x range: [{:.4}, {:.4}]", self.x_range.0, self.x_range.1)?;
        writeln!(f, "z range: [{:.4}, {:.4}]", self.z_range.0, self.z_range.1)?;
        writeln!(f, "termination:")?;
        for (r, n) in &self.termination_counts {
            writeln!(f, "  {r:<16} {n}")?;
        }
        writeln!(f, "length histogram:")?;
        for (t, n) in self.length_histogram.iter().enumerate().filter(|(_, n)| **n > 0) {
            writeln!(f, "  T={t:<3} {n}")?;
        }
        writeln!(f, "action frequencies (t: n, P(a=1)):")?;
        for (t, c) in self.action_counts.iter().enumerate() {
            writeln!(f, "  {t:>3}: {:>6} {:.4}", c[0] + c[1], self.action_frequency(t)[1])?;
        }
        if self.warnings.is_empty() {
            writeln!(f, "overlap: ok (threshold {})", self.threshold)?;
        } else {
            for w in &self.warnings {
                writeln!(
                    f,
                    "WARNING overlap: t={} action {} frequency {:.4} < {}",
                    w.t, w.action, w.frequency, self.threshold
                )?;
            }
        }
        Ok(())
    }
}
