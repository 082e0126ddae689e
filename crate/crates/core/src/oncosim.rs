//! Simulated treatment environment: autoregressive tumour volume `x` and side
//! effects `z` of order `p` under a binary treatment.
//!
//! ```text
//! x_{t+1} = mean(x_{t-p+1..=t}) + treat_coeff_x * S + drift_x + eps
//! z_{t+1} = mean(z_{t-p+1..=t}) + treat_coeff_z * S + drift_z + eta
//! S       = a_{t-p+1} + ... + a_t        (includes the action just taken)
//! ```
//!
//! Both covariates are clamped to `[0, max]` after every step; buffers are
//! padded with the initial values (and zero actions) before step `p`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CirlError, Result};
use crate::rng::{stream, SimRng};

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub p: usize,
    pub noise_std: f64,
    pub x0_mean: f64,
    pub x0_std: f64,
    pub z0_mean: f64,
    pub z0_std: f64,
    pub x_max: f64,
    pub z_max: f64,
    pub max_horizon: usize,
    pub treat_coeff_x: f64,
    pub treat_coeff_z: f64,
    pub drift_x: f64,
    pub drift_z: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig::with_order(5)
    }
}

impl SimConfig {
    /// Default dynamics for autoregressive order `p` (drifts `0.5p` and `-p`).
    pub fn with_order(p: usize) -> Self {
        SimConfig {
            p,
            noise_std: 0.1,
            x0_mean: 30.0,
            x0_std: 5.0,
            z0_mean: 2.0,
            z0_std: 1.0,
            x_max: 50.0,
            z_max: 15.0,
            max_horizon: 20,
            treat_coeff_x: -2.5,
            treat_coeff_z: 0.5,
            drift_x: 0.5 * p as f64,
            drift_z: -(p as f64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(CirlError::invalid("sim.p must be >= 1"));
        }
        if self.max_horizon == 0 {
            return Err(CirlError::invalid("sim.max_horizon must be >= 1"));
        }
        if !(self.noise_std >= 0.0) || !(self.x0_std >= 0.0) || !(self.z0_std >= 0.0) {
            return Err(CirlError::invalid("standard deviations must be non-negative"));
        }
        if !(self.x_max > 0.0) || !(self.z_max > 0.0) {
            return Err(CirlError::invalid("sim.x_max and sim.z_max must be positive"));
        }
        let reals = [
            self.x0_mean,
            self.z0_mean,
            self.treat_coeff_x,
            self.treat_coeff_z,
            self.drift_x,
            self.drift_z,
        ];
        if reals.iter().any(|v| !v.is_finite()) {
            return Err(CirlError::invalid("simulator coefficients must be finite"));
        }
        Ok(())
    }

    /// Ordered `(key, value)` pairs; the canonical serialization used by
    /// config files and dataset headers.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("p", self.p.to_string()),
            ("noise_std", fmt_real(self.noise_std)),
            ("x0_mean", fmt_real(self.x0_mean)),
            ("x0_std", fmt_real(self.x0_std)),
            ("z0_mean", fmt_real(self.z0_mean)),
            ("z0_std", fmt_real(self.z0_std)),
            ("x_max", fmt_real(self.x_max)),
            ("z_max", fmt_real(self.z_max)),
            ("max_horizon", self.max_horizon.to_string()),
            ("treat_coeff_x", fmt_real(self.treat_coeff_x)),
            ("treat_coeff_z", fmt_real(self.treat_coeff_z)),
            ("drift_x", fmt_real(self.drift_x)),
            ("drift_z", fmt_real(self.drift_z)),
        ]
    }

    /// Set one field by key. Returns `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn real(key: &str, v: &str) -> Result<f64> {
            v.trim()
                .parse()
                .map_err(|_| CirlError::invalid(format!("sim.{key}: bad real `{v}`")))
        }
        fn count(key: &str, v: &str) -> Result<usize> {
            v.trim()
                .parse()
                .map_err(|_| CirlError::invalid(format!("sim.{key}: bad count `{v}`")))
        }
        match key {
            "p" => self.p = count(key, value)?,
            "noise_std" => self.noise_std = real(key, value)?,
            "x0_mean" => self.x0_mean = real(key, value)?,
            "x0_std" => self.x0_std = real(key, value)?,
            "z0_mean" => self.z0_mean = real(key, value)?,
            "z0_std" => self.z0_std = real(key, value)?,
            "x_max" => self.x_max = real(key, value)?,
            "z_max" => self.z_max = real(key, value)?,
            "max_horizon" => self.max_horizon = count(key, value)?,
            "treat_coeff_x" => self.treat_coeff_x = real(key, value)?,
            "treat_coeff_z" => self.treat_coeff_z = real(key, value)?,
            "drift_x" => self.drift_x = real(key, value)?,
            "drift_z" => self.drift_z = real(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Termination rule applied to a (post-clamp) covariate pair reached at step `t`.
    pub fn termination(&self, x: f64, z: f64, t: usize) -> Option<TerminationReason> {
        if x <= 0.0 {
            Some(TerminationReason::TumorCleared)
        } else if x >= self.x_max {
            Some(TerminationReason::TumorMax)
        } else if z >= self.z_max {
            Some(TerminationReason::SideEffectMax)
        } else if t >= self.max_horizon {
            Some(TerminationReason::Horizon)
        } else {
            None
        }
    }
}

/// Reals are written with 17 significant digits so they round-trip exactly.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TerminationReason {
    TumorCleared,
    TumorMax,
    SideEffectMax,
    Horizon,
}

impl TerminationReason {
    pub const ALL: [TerminationReason; 4] = [
        TerminationReason::TumorCleared,
        TerminationReason::TumorMax,
        TerminationReason::SideEffectMax,
        TerminationReason::Horizon,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TerminationReason::TumorCleared => "tumor_cleared",
            TerminationReason::TumorMax => "tumor_max",
            TerminationReason::SideEffectMax => "side_effect_max",
            TerminationReason::Horizon => "horizon",
        }
    }
}

impl fmt::Display for TerminationReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TerminationReason {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        TerminationReason::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown termination reason `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    /// Last `p` tumour values, oldest first.
    pub x_buffer: Vec<f64>,
    pub z_buffer: Vec<f64>,
    pub a_buffer: Vec<u8>,
    pub t: usize,
    pub termination: Option<TerminationReason>,
}

impl EnvState {
    pub fn terminated(&self) -> bool {
        self.termination.is_some()
    }

    pub fn x(&self) -> f64 {
        *self.x_buffer.last().expect("buffer holds p >= 1 values")
    }

    pub fn z(&self) -> f64 {
        *self.z_buffer.last().expect("buffer holds p >= 1 values")
    }
}

/// Linear reward weights over the normalized next covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardWeights {
    pub w: Vec<f64>,
    pub gamma: f64,
}

impl RewardWeights {
    /// Weights scaled into the unit l1 ball (left untouched when already inside).
    pub fn new(w: Vec<f64>, gamma: f64) -> Result<Self> {
        let rw = RewardWeights::unnormalized(w, gamma)?;
        let l1 = rw.l1();
        if l1 > 1.0 {
            Ok(RewardWeights {
                w: rw.w.iter().map(|v| v / l1).collect(),
                gamma,
            })
        } else {
            Ok(rw)
        }
    }

    /// Weights taken as given (candidate-policy training uses raw directions).
    pub fn unnormalized(w: Vec<f64>, gamma: f64) -> Result<Self> {
        if w.is_empty() || w.iter().any(|v| !v.is_finite()) {
            return Err(CirlError::invalid("reward weights must be a finite, non-empty vector"));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(CirlError::invalid(format!("gamma must lie in [0, 1), got {gamma}")));
        }
        Ok(RewardWeights { w, gamma })
    }

    pub fn l1(&self) -> f64 {
        self.w.iter().map(|v| v.abs()).sum()
    }

    /// Exactly unit l1 norm (zero vector stays zero).
    pub fn l1_normalized(&self) -> RewardWeights {
        let l1 = self.l1();
        let w = if l1 > 0.0 {
            self.w.iter().map(|v| v / l1).collect()
        } else {
            self.w.clone()
        };
        RewardWeights { w, gamma: self.gamma }
    }
}

/// Sample an initial state: `x0 ~ N(x0_mean, x0_std)` clamped into `(0, x_max)`,
/// `z0 ~ N(z0_mean, z0_std)` clamped into `[0, z_max)`.
pub fn reset(config: &SimConfig, rng: &mut SimRng) -> EnvState {
    let x0 = sample_normal(rng, config.x0_mean, config.x0_std);
    let z0 = sample_normal(rng, config.z0_mean, config.z0_std);
    let tiny = 1e-9 * config.x_max;
    let x0 = x0.clamp(tiny, config.x_max - tiny);
    let z0 = z0.clamp(0.0, config.z_max * (1.0 - 1e-12));
    EnvState {
        x_buffer: vec![x0; config.p],
        z_buffer: vec![z0; config.p],
        a_buffer: vec![0; config.p],
        t: 0,
        termination: None,
    }
}

/// [`reset`] with a fresh generator for `seed`.
pub fn reset_seeded(config: &SimConfig, seed: u64) -> EnvState {
    reset(config, &mut stream(seed, 0))
}

fn sample_normal(rng: &mut SimRng, mean: f64, std: f64) -> f64 {
    if std == 0.0 {
        return mean;
    }
    Normal::new(mean, std).expect("validated std").sample(rng)
}

/// Raw (pre-clamp) next covariates for `action`, without noise.
pub fn mean_dynamics(config: &SimConfig, state: &EnvState, action: u8) -> (f64, f64) {
    let p = config.p as f64;
    let treated: u32 = state.a_buffer[1..].iter().map(|&a| u32::from(a)).sum::<u32>() + u32::from(action);
    let s = f64::from(treated);
    let x = state.x_buffer.iter().sum::<f64>() / p + config.treat_coeff_x * s + config.drift_x;
    let z = state.z_buffer.iter().sum::<f64>() / p + config.treat_coeff_z * s + config.drift_z;
    (x, z)
}

/// Advance one step. Noise is drawn only when `noise_std > 0`, so noise-free
/// dynamics are a pure function of `(state, action)`.
pub fn step(config: &SimConfig, state: &EnvState, action: u8, rng: &mut SimRng) -> Result<(EnvState, f64, f64)> {
    if let Some(reason) = state.termination {
        return Err(CirlError::InvalidState(format!(
            "step after termination ({reason}) at t={}",
            state.t
        )));
    }
    if action > 1 {
        return Err(CirlError::invalid(format!("action must be 0 or 1, got {action}")));
    }
    let (mut x, mut z) = mean_dynamics(config, state, action);
    if config.noise_std > 0.0 {
        let noise = Normal::new(0.0, config.noise_std).expect("validated std");
        x += noise.sample(rng);
        z += noise.sample(rng);
    }
    let x = x.clamp(0.0, config.x_max);
    let z = z.clamp(0.0, config.z_max);
    let t = state.t + 1;

    let mut next = state.clone();
    next.x_buffer.rotate_left(1);
    next.z_buffer.rotate_left(1);
    next.a_buffer.rotate_left(1);
    *next.x_buffer.last_mut().unwrap() = x;
    *next.z_buffer.last_mut().unwrap() = z;
    *next.a_buffer.last_mut().unwrap() = action;
    next.t = t;
    next.termination = config.termination(x, z, t);
    Ok((next, x, z))
}

/// Reward for a realized transition: `w1 * x/(x_max - 0) + w2 * z/(z_max - 0)`.
pub fn reward_of(config: &SimConfig, weights: &[f64], next_x: f64, next_z: f64) -> f64 {
    weights[0] * next_x / config.x_max + weights[1] * next_z / config.z_max
}

/// Reward for taking `action` in `state`, simulating the next covariates.
pub fn true_reward(
    config: &SimConfig,
    state: &EnvState,
    action: u8,
    weights: &RewardWeights,
    rng: &mut SimRng,
) -> Result<f64> {
    let (_, x, z) = step(config, state, action, rng)?;
    Ok(reward_of(config, &weights.w, x, z))
}

/// Uniform draw of an action index.
pub fn random_action(rng: &mut SimRng) -> u8 {
    u8::from(rng.random_bool(0.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless() -> SimConfig {
        SimConfig {
            noise_std: 0.0,
            ..SimConfig::default()
        }
    }

    fn state_with(x: f64, z: f64, actions: [u8; 5]) -> EnvState {
        EnvState {
            x_buffer: vec![x; 5],
            z_buffer: vec![z; 5],
            a_buffer: actions.to_vec(),
            t: 0,
            termination: None,
        }
    }

    #[test]
    fn defaults_match_simulation_setup() {
        let c = SimConfig::default();
        assert_eq!(c.p, 5);
        assert_eq!(c.noise_std, 0.1);
        assert_eq!((c.x0_mean, c.x0_std, c.z0_mean, c.z0_std), (30.0, 5.0, 2.0, 1.0));
        assert_eq!((c.x_max, c.z_max, c.max_horizon), (50.0, 15.0, 20));
        assert_eq!((c.treat_coeff_x, c.treat_coeff_z), (-2.5, 0.5));
        assert_eq!((c.drift_x, c.drift_z), (2.5, -5.0));
    }

    #[test]
    fn untreated_tumour_step() {
        let c = noiseless();
        let (_, x, _) = step(&c, &state_with(30.0, 2.0, [0; 5]), 0, &mut stream(0, 0)).unwrap();
        assert!((x - 32.5).abs() < 1e-12);
    }

    #[test]
    fn untreated_side_effects_clamp_to_zero() {
        let c = noiseless();
        let s = state_with(30.0, 2.0, [0; 5]);
        let (raw_x, raw_z) = mean_dynamics(&c, &s, 0);
        assert!((raw_x - 32.5).abs() < 1e-12);
        assert!((raw_z + 3.0).abs() < 1e-12);
        let (_, _, z) = step(&c, &s, 0, &mut stream(0, 0)).unwrap();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn fully_treated_window() {
        let c = noiseless();
        let (_, x, _) = step(&c, &state_with(30.0, 2.0, [1; 5]), 1, &mut stream(0, 0)).unwrap();
        assert!((x - 20.0).abs() < 1e-12);
    }

    #[test]
    fn treatment_effect_is_monotone_and_exact() {
        let c = noiseless();
        let s = state_with(27.0, 9.0, [1, 0, 1, 0, 0]);
        let (x0, z0) = mean_dynamics(&c, &s, 0);
        let (x1, z1) = mean_dynamics(&c, &s, 1);
        assert!((x0 - x1 - 2.5).abs() < 1e-12);
        assert!((z1 - z0 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reward_evaluation() {
        let c = noiseless();
        let w = RewardWeights::new(vec![-0.3, -0.7], 0.99).unwrap();
        let s = state_with(30.0, 2.0, [0; 5]);
        let r = true_reward(&c, &s, 0, &w, &mut stream(0, 0)).unwrap();
        assert!((r + 0.195).abs() < 1e-12, "{r}");
        let zero = RewardWeights::new(vec![0.0, 0.0], 0.99).unwrap();
        assert_eq!(true_reward(&c, &s, 1, &zero, &mut stream(0, 0)).unwrap(), 0.0);
        assert_eq!(reward_of(&c, &w.w, 0.0, 0.0), 0.0);
    }

    #[test]
    fn reset_is_deterministic_and_clamped() {
        let c = SimConfig::default();
        assert_eq!(reset_seeded(&c, 4), reset_seeded(&c, 4));
        let mut rng = stream(9, 0);
        for _ in 0..2000 {
            let s = reset(&c, &mut rng);
            assert!(s.z() >= 0.0 && s.z() < c.z_max);
            assert!(s.x() > 0.0 && s.x() < c.x_max);
            assert_eq!(s.x_buffer.len(), 5);
            assert!(s.a_buffer.iter().all(|&a| a == 0));
        }
    }

    #[test]
    fn initial_tumour_distribution() {
        let c = SimConfig::default();
        let mut rng = stream(21, 0);
        let xs: Vec<f64> = (0..10_000).map(|_| reset(&c, &mut rng).x()).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((mean - 30.0).abs() < 0.2, "mean {mean}");
        assert!((var.sqrt() - 5.0).abs() < 0.3, "std {}", var.sqrt());
    }

    #[test]
    fn step_after_termination_fails() {
        let c = SimConfig::default();
        let mut s = reset_seeded(&c, 1);
        let mut rng = stream(1, 1);
        let mut steps = 0;
        while !s.terminated() {
            s = step(&c, &s, 1, &mut rng).unwrap().0;
            steps += 1;
        }
        assert!(steps <= c.max_horizon);
        assert!(matches!(step(&c, &s, 0, &mut rng), Err(CirlError::InvalidState(_))));
    }

    #[test]
    fn trajectories_respect_horizon() {
        let c = SimConfig::default();
        for seed in 0..200 {
            let mut rng = stream(seed, 0);
            let mut s = reset(&c, &mut rng);
            while !s.terminated() {
                let a = random_action(&mut rng);
                s = step(&c, &s, a, &mut rng).unwrap().0;
                assert!(s.x() >= 0.0 && s.x() <= c.x_max && s.z() >= 0.0 && s.z() <= c.z_max);
            }
            assert!(s.t <= c.max_horizon);
        }
    }

    #[test]
    fn noise_free_step_ignores_rng() {
        let c = noiseless();
        let s = reset_seeded(&c, 3);
        let a = step(&c, &s, 1, &mut stream(1, 0)).unwrap();
        let b = step(&c, &s, 1, &mut stream(2, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weights_normalize_into_l1_ball() {
        let w = RewardWeights::new(vec![-3.0, 1.0], 0.5).unwrap();
        assert!((w.l1() - 1.0).abs() < 1e-12);
        let inside = RewardWeights::new(vec![-0.3, -0.2], 0.5).unwrap();
        assert_eq!(inside.w, vec![-0.3, -0.2]);
        assert!(RewardWeights::new(vec![0.1], 1.0).is_err());
    }
}
