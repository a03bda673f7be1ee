//! Toy continuous-control systems and perturbation wrappers.

mod systems;
mod wrappers;

pub use systems::{MassSpring, MassSpringParams, Pendulum, PendulumParams, PointMass, PointMassParams};
pub use wrappers::{ActionNoise, Distractors, MassScale, ObsNoise};

use crate::error::{MtcError, Result};

pub const DEFAULT_HORIZON: usize = 1000;
pub const DT: f64 = 0.05;
pub const ENV_IDS: [&str; 3] = ["pendulum", "pointmass", "massspring"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub horizon: usize,
}

impl EnvSpec {
    pub fn new(obs_dim: usize, act_dim: usize, horizon: usize) -> Result<Self> {
        if obs_dim == 0 || act_dim == 0 || horizon == 0 {
            return Err(MtcError::Config(format!("invalid env spec {obs_dim}/{act_dim}/{horizon}")));
        }
        Ok(Self { obs_dim, act_dim, horizon })
    }
}

/// What an environment returns after one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// Physical termination.
    pub done: bool,
    /// Time-limit truncation.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    /// 1 only on physical termination.
    pub d: f64,
    /// Episode ended by the time limit.
    pub truncated: bool,
}

impl Transition {
    pub fn ends_episode(&self) -> bool {
        self.d == 1.0 || self.truncated
    }
}

pub trait Env {
    fn spec(&self) -> EnvSpec;

    /// Starts a new episode and returns the first observation.
    fn reset(&mut self) -> Result<Vec<f64>>;

    /// Advances one step; `action` components must lie in `[-1, 1]`.
    fn step(&mut self, action: &[f64]) -> Result<StepOutcome>;

    /// Sets the multiplier applied to the nominal body mass(es); takes
    /// effect at the next reset.
    fn set_mass_scale(&mut self, k: f64) -> Result<()>;

    /// Lowest and highest per-step reward.
    fn reward_range(&self) -> (f64, f64);
}

pub(crate) fn check_action(action: &[f64], act_dim: usize) -> Result<()> {
    if action.len() != act_dim {
        return Err(MtcError::Shape(format!("expected {act_dim} action components, got {}", action.len())));
    }
    if action.iter().any(|a| !(-1.0..=1.0).contains(a)) {
        return Err(MtcError::Domain(format!("action {action:?} outside [-1, 1]")));
    }
    Ok(())
}

pub(crate) fn check_mass_scale(k: f64) -> Result<()> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(MtcError::Config(format!("mass scale must be positive, got {k}")));
    }
    Ok(())
}

/// Perturbations applied on top of a base system.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationConfig {
    pub obs_noise_sigma: f64,
    pub action_noise_sigma: f64,
    pub mass_scale: f64,
    pub distractor_dims: usize,
    pub distractor_sigma: f64,
    pub distractor_rho: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            obs_noise_sigma: 0.0,
            action_noise_sigma: 0.0,
            mass_scale: 1.0,
            distractor_dims: 0,
            distractor_sigma: 0.1,
            distractor_rho: 0.9,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.obs_noise_sigma >= 0.0) || !(self.action_noise_sigma >= 0.0) || !(self.distractor_sigma >= 0.0) {
            return Err(MtcError::Config("noise scales must be non-negative".into()));
        }
        if !(self.distractor_rho.abs() < 1.0) {
            return Err(MtcError::Config("distractor autocorrelation must lie in (-1, 1)".into()));
        }
        check_mass_scale(self.mass_scale)
    }

    pub fn is_identity(&self) -> bool {
        self.obs_noise_sigma == 0.0 && self.action_noise_sigma == 0.0 && self.mass_scale == 1.0 && self.distractor_dims == 0
    }
}

/// Base system by registry id.
pub fn base_env(id: &str, seed: u64, horizon: usize) -> Result<Box<dyn Env>> {
    Ok(match id {
        "pendulum" => Box::new(Pendulum::new(PendulumParams::default(), seed, horizon)?),
        "pointmass" => Box::new(PointMass::new(PointMassParams::default(), seed, horizon)?),
        "massspring" => Box::new(MassSpring::new(MassSpringParams::default(), seed, horizon)?),
        other => {
            return Err(MtcError::Config(format!("unknown env id {other:?}; valid ids: {}", ENV_IDS.join(", "))));
        }
    })
}

/// Base system wrapped with every non-trivial perturbation. Each wrapper
/// draws from its own stream of `seed`.
pub fn make_env(id: &str, p: &PerturbationConfig, seed: u64, horizon: usize) -> Result<Box<dyn Env>> {
    p.validate()?;
    let mut env = base_env(id, seed, horizon)?;
    if p.mass_scale != 1.0 {
        env = Box::new(MassScale::new(env, p.mass_scale)?);
    }
    if p.action_noise_sigma > 0.0 {
        env = Box::new(ActionNoise::new(env, p.action_noise_sigma, seed)?);
    }
    if p.distractor_dims > 0 {
        env = Box::new(Distractors::new(env, p.distractor_dims, p.distractor_rho, p.distractor_sigma, seed)?);
    }
    if p.obs_noise_sigma > 0.0 {
        env = Box::new(ObsNoise::new(env, p.obs_noise_sigma, seed)?);
    }
    Ok(env)
}
