//! Evaluation against the simulator and report artifacts (CSV tables, SVG plots).

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;

use crate::cirl::MixingPolicy;
use crate::cohort::{self, BatchDataset};
use crate::error::{CirlError, Result};
use crate::expert::ExpertPolicy;
use crate::history::History;
use crate::oncosim::{self, fmt_real, RewardWeights, SimConfig};
use crate::policy::{sample_action, Policy};
use crate::rng::stream;

/// Mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Estimate {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Estimate {
            mean,
            stderr: (var / n).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub mean_cumulative_reward: Estimate,
    pub action_match_accuracy: Estimate,
    pub recovered_weights: RewardWeights,
    pub margin_trace: Vec<f64>,
}

fn rollout(
    policy: &dyn Policy,
    config: &SimConfig,
    weights: &RewardWeights,
    gamma: f64,
    seed: u64,
    index: u64,
) -> Result<f64> {
    let mut rng = stream(seed, index);
    let mut state = oncosim::reset(config, &mut rng);
    let mut h = History::initial(state.x(), state.z());
    let mut ret = 0.0;
    let mut g = 1.0;
    while !state.terminated() {
        let a = policy.act(&h, &mut rng);
        let (next, x, z) = oncosim::step(config, &state, a, &mut rng)?;
        ret += g * oncosim::reward_of(config, &weights.w, x, z);
        g *= gamma;
        h.push(a, [x, z]);
        state = next;
    }
    Ok(ret)
}

/// Discounted true return over `m` fresh rollouts.
pub fn cumulative_reward(
    policy: &dyn Policy,
    config: &SimConfig,
    weights: &RewardWeights,
    gamma: f64,
    m: usize,
    seed: u64,
) -> Result<Estimate> {
    if m == 0 {
        return Err(CirlError::invalid("need at least one rollout"));
    }
    let xs = (0..m as u64)
        .into_par_iter()
        .map(|i| rollout(policy, config, weights, gamma, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Estimate::from_samples(&xs))
}

/// [`cumulative_reward`] for a mixture: each rollout first draws one
/// component policy with the mixing probabilities.
pub fn cumulative_reward_mixture(
    mixing: &MixingPolicy,
    policies: &[&dyn Policy],
    config: &SimConfig,
    weights: &RewardWeights,
    gamma: f64,
    m: usize,
    seed: u64,
) -> Result<Estimate> {
    if m == 0 || policies.len() != mixing.lambdas.len() {
        return Err(CirlError::invalid("mixture needs one policy per weight and m >= 1"));
    }
    let xs = (0..m as u64)
        .into_par_iter()
        .map(|i| {
            let k = mixing.sample_component(&mut stream(seed ^ 0x6d69_7865, i));
            rollout(policies[k], config, weights, gamma, seed, i)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Estimate::from_samples(&xs))
}

/// Per-trajectory agreement averaged over trajectories, on a given test set.
pub fn action_match_accuracy_on(policy: &dyn Policy, test: &BatchDataset, seed: u64) -> Estimate {
    let per: Vec<f64> = test
        .trajectories
        .par_iter()
        .map(|tr| {
            let mut rng = stream(seed, tr.id);
            let probs = policy.prefix_probs(&tr.history, tr.len());
            let hits = probs
                .iter()
                .zip(tr.actions())
                .filter(|(&p, &a)| sample_action(p, &mut rng) == a)
                .count();
            hits as f64 / tr.len() as f64
        })
        .collect();
    Estimate::from_samples(&per)
}

/// Agreement with the expert on `n` freshly simulated expert trajectories.
pub fn action_match_accuracy(
    policy: &dyn Policy,
    expert: &ExpertPolicy,
    config: &SimConfig,
    n: usize,
    seed: u64,
) -> Result<Estimate> {
    let test = cohort::generate(expert, config, n, seed)?;
    Ok(action_match_accuracy_on(policy, &test, seed ^ 0x6163_6375))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightComparison {
    pub recovered: Vec<f64>,
    pub truth: Vec<f64>,
    pub sign_agreement: Vec<bool>,
    /// Whether `|w_1| < |w_2|` holds equally for both.
    pub ordering_agreement: bool,
    pub l1_distance: f64,
}

impl WeightComparison {
    pub fn signs_agree(&self) -> bool {
        self.sign_agreement.iter().all(|&s| s)
    }
}

pub fn weight_report(recovered: &RewardWeights, truth: &RewardWeights) -> WeightComparison {
    let r = recovered.l1_normalized().w;
    let t = truth.l1_normalized().w;
    let sign_agreement = r.iter().zip(&t).map(|(a, b)| a.signum() == b.signum()).collect();
    let order = |w: &[f64]| w[0].abs().partial_cmp(&w[1].abs());
    WeightComparison {
        l1_distance: r.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum(),
        ordering_agreement: r.len() >= 2 && order(&r) == order(&t),
        sign_agreement,
        recovered: r,
        truth: t,
    }
}

/// One row of the policy-quality table.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRow {
    pub method: String,
    pub reward: Estimate,
    pub accuracy: Option<Estimate>,
}

pub fn write_policy_table<W: Write>(rows: &[PolicyRow], mut out: W) -> Result<()> {
    writeln!(out, "method,reward_mean,reward_stderr,accuracy_mean,accuracy_stderr")?;
    for r in rows {
        let (am, asd) = r.accuracy.map_or((String::new(), String::new()), |a| {
            (fmt_real(a.mean), fmt_real(a.stderr))
        });
        writeln!(
            out,
            "{},{},{},{am},{asd}",
            r.method,
            fmt_real(r.reward.mean),
            fmt_real(r.reward.stderr)
        )?;
    }
    Ok(())
}

/// Recovered weights per run or method.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRow {
    pub label: String,
    pub comparison: WeightComparison,
}

pub fn write_weight_table<W: Write>(rows: &[WeightRow], mut out: W) -> Result<()> {
    writeln!(
        out,
        "label,w_1,w_2,true_w_1,true_w_2,sign_1,sign_2,ordering,l1_distance"
    )?;
    for r in rows {
        let c = &r.comparison;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.label,
            fmt_real(c.recovered[0]),
            fmt_real(c.recovered[1]),
            fmt_real(c.truth[0]),
            fmt_real(c.truth[1]),
            u8::from(c.sign_agreement[0]),
            u8::from(c.sign_agreement[1]),
            u8::from(c.ordering_agreement),
            fmt_real(c.l1_distance)
        )?;
    }
    Ok(())
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Scatter of recovered `(w_1, w_2)` in the l1 ball with the true weights marked.
pub fn weights_svg(rows: &[WeightRow]) -> String {
    let sx = |v: f64| PAD + (v + 1.0) / 2.0 * (W - 2.0 * PAD);
    let sy = |v: f64| H - PAD - (v + 1.0) / 2.0 * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    // l1 unit ball and axes
    let _ = writeln!(
        s,
        r##"<polygon points="{},{} {},{} {},{} {},{}" fill="none" stroke="#bbb"/>"##,
        sx(1.0),
        sy(0.0),
        sx(0.0),
        sy(1.0),
        sx(-1.0),
        sy(0.0),
        sx(0.0),
        sy(-1.0)
    );
    let _ = writeln!(
        s,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#888"/>"##,
        sx(-1.0),
        sy(0.0),
        sx(1.0),
        sy(0.0)
    );
    let _ = writeln!(
        s,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#888"/>"##,
        sx(0.0),
        sy(-1.0),
        sx(0.0),
        sy(1.0)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">w1 (tumour)</text>"#,
        W - PAD,
        sy(0.0) + 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}">w2 (side effects)</text>"#,
        sx(0.0) + 6.0,
        PAD - 8.0
    );
    if let Some(first) = rows.first() {
        let t = &first.comparison.truth;
        let (x, y) = (sx(t[0]), sy(t[1]));
        let _ = writeln!(
            s,
            r#"<path d="M{} {} L{} {} M{} {} L{} {}" stroke="black" stroke-width="2"/>"#,
            x - 6.0,
            y - 6.0,
            x + 6.0,
            y + 6.0,
            x - 6.0,
            y + 6.0,
            x + 6.0,
            y - 6.0
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">true</text>"#, x + 8.0, y + 4.0);
    }
    for (i, r) in rows.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let w = &r.comparison.recovered;
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="5" fill="{c}" fill-opacity="0.8"/>"#,
            sx(w[0]),
            sy(w[1])
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{c}">{}</text>"#,
            W - PAD - 120.0,
            PAD + 16.0 * i as f64,
            esc(&r.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Margin `t_k` against iteration, one polyline per labelled trace.
pub fn margins_svg(traces: &[(String, Vec<f64>)]) -> String {
    let kmax = traces.iter().map(|t| t.1.len()).max().unwrap_or(1).max(2) as f64;
    let vmax = traces
        .iter()
        .flat_map(|t| t.1.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let sx = |k: f64| PAD + (k - 1.0) / (kmax - 1.0) * (W - 2.0 * PAD);
    let sy = |v: f64| H - PAD - v / vmax * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r##"<polyline points="{},{} {},{} {},{}" fill="none" stroke="#888"/>"##,
        PAD,
        PAD,
        PAD,
        H - PAD,
        W - PAD,
        H - PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">iteration</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}">margin (max {:.4})</text>"#,
        PAD,
        PAD - 10.0,
        vmax
    );
    for (i, (label, ys)) in traces.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ys
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(k, v)| format!("{:.2},{:.2}", sx(k as f64 + 1.0), sy(*v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{c}">{}</text>"#,
            W - PAD - 120.0,
            PAD + 16.0 * i as f64,
            esc(label)
        );
    }
    s.push_str("</svg>\n");
    s
}
