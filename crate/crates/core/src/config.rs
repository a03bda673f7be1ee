//! Run configuration as flat `key = value` text.

use std::fmt::Write as _;
use std::path::Path;

use crate::envs::{PerturbationConfig, DEFAULT_HORIZON, ENV_IDS};
use crate::error::{MtcError, Result};
use crate::nn::{OutputNorm, Representation};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algo {
    Mtc,
    /// MTC without the action prediction model.
    MtcNoa,
    /// One-step, state-only regularizer.
    Rpc,
    Sac,
}

impl Algo {
    pub const NAMES: [&'static str; 4] = ["mtc", "mtc-noa", "rpc", "sac"];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mtc" => Ok(Self::Mtc),
            "mtc-noa" => Ok(Self::MtcNoa),
            "rpc" => Ok(Self::Rpc),
            "sac" => Ok(Self::Sac),
            other => Err(MtcError::Config(format!("unknown algo {other:?}; valid: {}", Self::NAMES.join(", ")))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mtc => "mtc",
            Self::MtcNoa => "mtc-noa",
            Self::Rpc => "rpc",
            Self::Sac => "sac",
        }
    }

    pub fn representation(self) -> Representation {
        match self {
            Self::Mtc => Representation::History { action_model: true },
            Self::MtcNoa => Representation::History { action_model: false },
            Self::Rpc => Representation::OneStep,
            Self::Sac => Representation::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub env: String,
    pub algo: Algo,
    /// When false the information terms are computed for diagnostics only,
    /// with α pinned at 0 and no representation updates.
    pub regularizer: bool,
    pub seed: u64,
    pub total_steps: u64,
    pub init_steps: u64,
    pub horizon: usize,
    pub gamma: f64,
    pub batch_size: usize,
    pub history: usize,
    pub replay_capacity: usize,
    pub actor_update_freq: u64,
    pub target_update_freq: u64,
    pub tau: f64,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub repr_lr: f64,
    pub alpha_lr: f64,
    pub temperature_lr: f64,
    pub init_temperature: f64,
    pub init_alpha: f64,
    pub ip: f64,
    pub m: f64,
    /// `None` means `−dim(A)`.
    pub target_entropy: Option<f64>,
    /// Global-norm gradient clip per optimizer group; `None` disables it.
    pub grad_clip: Option<f64>,
    pub hidden: usize,
    pub latent_dim: usize,
    pub rnn_hidden: usize,
    pub output_norm: OutputNorm,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub checkpoint_every: u64,
    pub perturbation: PerturbationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: "pendulum".into(),
            algo: Algo::Mtc,
            regularizer: true,
            seed: 0,
            total_steps: 100_000,
            init_steps: 5000,
            horizon: DEFAULT_HORIZON,
            gamma: 0.99,
            batch_size: 256,
            history: 8,
            replay_capacity: 1_000_000,
            actor_update_freq: 1,
            target_update_freq: 2,
            tau: 0.01,
            critic_lr: 1e-4,
            actor_lr: 1e-4,
            repr_lr: 1e-4,
            alpha_lr: 1e-4,
            temperature_lr: 1e-4,
            init_temperature: 0.1,
            init_alpha: 1e-6,
            ip: -7.0,
            m: 1e-6,
            target_entropy: None,
            grad_clip: None,
            hidden: 256,
            latent_dim: 30,
            rnn_hidden: 256,
            output_norm: OutputNorm::LayerNorm,
            eval_every: 20_000,
            eval_episodes: 10,
            checkpoint_every: 20_000,
            perturbation: PerturbationConfig::default(),
        }
    }
}

/// Every recognized key with a one-line description, in manifest order.
pub const KEYS: [(&str, &str); 38] = [
    ("env", "environment id: pendulum, pointmass or massspring"),
    ("algo", "mtc, mtc-noa, rpc or sac"),
    ("regularizer", "true/false; false pins alpha at 0 and freezes the representation"),
    ("seed", "master seed for every random stream"),
    ("total_steps", "environment steps to collect"),
    ("init_steps", "random-action steps before the first update"),
    ("horizon", "episode length in steps"),
    ("gamma", "discount"),
    ("batch_size", "windows per update"),
    ("history", "transitions per replay window (H)"),
    ("replay_capacity", "replay buffer capacity in transitions"),
    ("actor_update_freq", "actor/representation update period in steps"),
    ("target_update_freq", "target critic update period in steps"),
    ("tau", "target critic soft-update rate"),
    ("critic_lr", "critic learning rate"),
    ("actor_lr", "policy learning rate"),
    ("repr_lr", "encoder and predictor learning rate"),
    ("alpha_lr", "learning rate of log alpha"),
    ("temperature_lr", "learning rate of log beta'"),
    ("init_temperature", "initial beta'"),
    ("init_alpha", "initial alpha"),
    ("ip", "constraint level I_p of the dual update"),
    ("m", "bound mixing coefficient in [0, 1]"),
    ("target_entropy", "auto (= -dim A) or a number"),
    ("grad_clip", "off or a positive global-norm threshold"),
    ("hidden", "perceptron width"),
    ("latent_dim", "latent dimension"),
    ("rnn_hidden", "recurrent hidden width"),
    ("output_norm", "layer_norm or none on the recurrent output"),
    ("eval_every", "evaluation period in steps (0 disables)"),
    ("eval_episodes", "episodes per evaluation"),
    ("checkpoint_every", "checkpoint period in steps (0: only at the end)"),
    ("obs_noise", "observation noise scale"),
    ("action_noise", "action noise scale"),
    ("mass_scale", "body mass multiplier"),
    ("distractor_dims", "number of appended distractor dimensions"),
    ("distractor_sigma", "distractor innovation scale"),
    ("distractor_rho", "distractor autocorrelation"),
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| MtcError::Config(format!("{key}: cannot parse {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(MtcError::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let p = &mut self.perturbation;
        match key {
            "env" => self.env = v.to_string(),
            "algo" => self.algo = Algo::parse(v)?,
            "regularizer" => self.regularizer = boolean(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "total_steps" => self.total_steps = num(key, v)?,
            "init_steps" => self.init_steps = num(key, v)?,
            "horizon" => self.horizon = num(key, v)?,
            "gamma" => self.gamma = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "history" => self.history = num(key, v)?,
            "replay_capacity" => self.replay_capacity = num(key, v)?,
            "actor_update_freq" => self.actor_update_freq = num(key, v)?,
            "target_update_freq" => self.target_update_freq = num(key, v)?,
            "tau" => self.tau = num(key, v)?,
            "critic_lr" => self.critic_lr = num(key, v)?,
            "actor_lr" => self.actor_lr = num(key, v)?,
            "repr_lr" => self.repr_lr = num(key, v)?,
            "alpha_lr" => self.alpha_lr = num(key, v)?,
            "temperature_lr" => self.temperature_lr = num(key, v)?,
            "init_temperature" => self.init_temperature = num(key, v)?,
            "init_alpha" => self.init_alpha = num(key, v)?,
            "ip" => self.ip = num(key, v)?,
            "m" => self.m = num(key, v)?,
            "target_entropy" => self.target_entropy = if v == "auto" { None } else { Some(num(key, v)?) },
            "grad_clip" => self.grad_clip = if v == "off" { None } else { Some(num(key, v)?) },
            "hidden" => self.hidden = num(key, v)?,
            "latent_dim" => self.latent_dim = num(key, v)?,
            "rnn_hidden" => self.rnn_hidden = num(key, v)?,
            "output_norm" => self.output_norm = OutputNorm::parse(v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            "eval_episodes" => self.eval_episodes = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "obs_noise" => p.obs_noise_sigma = num(key, v)?,
            "action_noise" => p.action_noise_sigma = num(key, v)?,
            "mass_scale" => p.mass_scale = num(key, v)?,
            "distractor_dims" => p.distractor_dims = num(key, v)?,
            "distractor_sigma" => p.distractor_sigma = num(key, v)?,
            "distractor_rho" => p.distractor_rho = num(key, v)?,
            other => return Err(MtcError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let p = &self.perturbation;
        let opt = |o: Option<f64>, none: &str| o.map_or(none.to_string(), |x| x.to_string());
        Some(match key {
            "env" => self.env.clone(),
            "algo" => self.algo.as_str().into(),
            "regularizer" => self.regularizer.to_string(),
            "seed" => self.seed.to_string(),
            "total_steps" => self.total_steps.to_string(),
            "init_steps" => self.init_steps.to_string(),
            "horizon" => self.horizon.to_string(),
            "gamma" => self.gamma.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "history" => self.history.to_string(),
            "replay_capacity" => self.replay_capacity.to_string(),
            "actor_update_freq" => self.actor_update_freq.to_string(),
            "target_update_freq" => self.target_update_freq.to_string(),
            "tau" => self.tau.to_string(),
            "critic_lr" => self.critic_lr.to_string(),
            "actor_lr" => self.actor_lr.to_string(),
            "repr_lr" => self.repr_lr.to_string(),
            "alpha_lr" => self.alpha_lr.to_string(),
            "temperature_lr" => self.temperature_lr.to_string(),
            "init_temperature" => self.init_temperature.to_string(),
            "init_alpha" => self.init_alpha.to_string(),
            "ip" => self.ip.to_string(),
            "m" => self.m.to_string(),
            "target_entropy" => opt(self.target_entropy, "auto"),
            "grad_clip" => opt(self.grad_clip, "off"),
            "hidden" => self.hidden.to_string(),
            "latent_dim" => self.latent_dim.to_string(),
            "rnn_hidden" => self.rnn_hidden.to_string(),
            "output_norm" => self.output_norm.as_str().into(),
            "eval_every" => self.eval_every.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "obs_noise" => p.obs_noise_sigma.to_string(),
            "action_noise" => p.action_noise_sigma.to_string(),
            "mass_scale" => p.mass_scale.to_string(),
            "distractor_dims" => p.distractor_dims.to_string(),
            "distractor_sigma" => p.distractor_sigma.to_string(),
            "distractor_rho" => p.distractor_rho.to_string(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MtcError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form; `parse(to_text())` restores the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(s, "{k}={}", self.get(k).expect("known key"));
        }
        s
    }

    /// Mixing coefficient actually used: the action bound only exists when
    /// the run has an action model.
    pub fn m_effective(&self) -> f64 {
        match self.algo {
            Algo::Mtc => self.m,
            _ => 0.0,
        }
    }

    pub fn target_entropy_for(&self, act_dim: usize) -> f64 {
        self.target_entropy.unwrap_or(-(act_dim as f64))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(MtcError::Config(msg.to_string()));
        if !ENV_IDS.contains(&self.env.as_str()) {
            return Err(MtcError::Config(format!("unknown env id {:?}; valid ids: {}", self.env, ENV_IDS.join(", "))));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.m) {
            return bad("m must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.history == 0 || self.horizon == 0 || self.replay_capacity == 0 {
            return bad("batch_size, history, horizon and replay_capacity must be positive");
        }
        if self.actor_update_freq == 0 || self.target_update_freq == 0 {
            return bad("update frequencies must be positive");
        }
        if self.hidden == 0 || self.latent_dim == 0 || self.rnn_hidden == 0 {
            return bad("model widths must be positive");
        }
        let rates = [self.critic_lr, self.actor_lr, self.repr_lr, self.alpha_lr, self.temperature_lr];
        if rates.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return bad("learning rates must be positive");
        }
        if !(self.init_temperature > 0.0) || !(self.init_alpha > 0.0) {
            return bad("initial temperature and alpha must be positive");
        }
        if !self.ip.is_finite() {
            return bad("ip must be finite");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive or off");
            }
        }
        if self.eval_every > 0 && self.eval_episodes == 0 {
            return bad("eval_episodes must be positive when evaluating");
        }
        self.perturbation.validate()
    }
}
