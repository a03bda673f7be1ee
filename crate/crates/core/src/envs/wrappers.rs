use super::{check_mass_scale, Env, EnvSpec, StepOutcome};
use crate::error::{MtcError, Result};
use crate::rng::{standard_normal, stream, StreamRng};

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(MtcError::Config(format!("noise scale must be non-negative, got {sigma}")));
    }
    Ok(())
}

/// Adds `N(0, σ²)` noise to every observation the agent sees. Rewards still
/// come from the true state.
pub struct ObsNoise {
    inner: Box<dyn Env>,
    sigma: f64,
    rng: StreamRng,
}

impl ObsNoise {
    pub fn new(inner: Box<dyn Env>, sigma: f64, seed: u64) -> Result<Self> {
        check_sigma(sigma)?;
        Ok(Self { inner, sigma, rng: stream(seed, "wrap.obs_noise") })
    }

    pub fn perturb(&mut self, mut obs: Vec<f64>) -> Vec<f64> {
        if self.sigma > 0.0 {
            for x in &mut obs {
                *x += self.sigma * standard_normal(&mut self.rng);
            }
        }
        obs
    }
}

impl Env for ObsNoise {
    fn spec(&self) -> EnvSpec {
        self.inner.spec()
    }

    fn reset(&mut self) -> Result<Vec<f64>> {
        let obs = self.inner.reset()?;
        Ok(self.perturb(obs))
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let mut out = self.inner.step(action)?;
        out.obs = self.perturb(std::mem::take(&mut out.obs));
        Ok(out)
    }

    fn set_mass_scale(&mut self, k: f64) -> Result<()> {
        self.inner.set_mass_scale(k)
    }

    fn reward_range(&self) -> (f64, f64) {
        self.inner.reward_range()
    }
}

/// Executes `clip(a + ε, −1, 1)` with `ε ~ N(0, σ²)`.
pub struct ActionNoise {
    inner: Box<dyn Env>,
    sigma: f64,
    rng: StreamRng,
}

impl ActionNoise {
    pub fn new(inner: Box<dyn Env>, sigma: f64, seed: u64) -> Result<Self> {
        check_sigma(sigma)?;
        Ok(Self { inner, sigma, rng: stream(seed, "wrap.action_noise") })
    }

    pub fn perturb(&mut self, action: &[f64]) -> Vec<f64> {
        if self.sigma == 0.0 {
            return action.to_vec();
        }
        action.iter().map(|a| (a + self.sigma * standard_normal(&mut self.rng)).clamp(-1.0, 1.0)).collect()
    }
}

impl Env for ActionNoise {
    fn spec(&self) -> EnvSpec {
        self.inner.spec()
    }

    fn reset(&mut self) -> Result<Vec<f64>> {
        self.inner.reset()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        super::check_action(action, self.spec().act_dim)?;
        let noisy = self.perturb(action);
        self.inner.step(&noisy)
    }

    fn set_mass_scale(&mut self, k: f64) -> Result<()> {
        self.inner.set_mass_scale(k)
    }

    fn reward_range(&self) -> (f64, f64) {
        self.inner.reward_range()
    }
}

/// Scales the body mass by `k` at every reset.
pub struct MassScale {
    inner: Box<dyn Env>,
    k: f64,
    outer: f64,
}

impl MassScale {
    pub fn new(inner: Box<dyn Env>, k: f64) -> Result<Self> {
        check_mass_scale(k)?;
        Ok(Self { inner, k, outer: 1.0 })
    }
}

impl Env for MassScale {
    fn spec(&self) -> EnvSpec {
        self.inner.spec()
    }

    fn reset(&mut self) -> Result<Vec<f64>> {
        self.inner.set_mass_scale(self.k * self.outer)?;
        self.inner.reset()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        self.inner.step(action)
    }

    /// Composes with the wrapper's own factor.
    fn set_mass_scale(&mut self, k: f64) -> Result<()> {
        check_mass_scale(k)?;
        self.outer = k;
        Ok(())
    }

    fn reward_range(&self) -> (f64, f64) {
        self.inner.reward_range()
    }
}

/// Appends `n` uncontrollable dimensions following `x' = ρ x + σ ε`.
pub struct Distractors {
    inner: Box<dyn Env>,
    rho: f64,
    sigma: f64,
    state: Vec<f64>,
    rng: StreamRng,
}

impl Distractors {
    pub fn new(inner: Box<dyn Env>, n: usize, rho: f64, sigma: f64, seed: u64) -> Result<Self> {
        check_sigma(sigma)?;
        if !(rho.abs() < 1.0) {
            return Err(MtcError::Config(format!("distractor autocorrelation {rho} outside (-1, 1)")));
        }
        Ok(Self { inner, rho, sigma, state: vec![0.0; n], rng: stream(seed, "wrap.distractors") })
    }

    fn extend(&self, mut obs: Vec<f64>) -> Vec<f64> {
        obs.extend_from_slice(&self.state);
        obs
    }
}

impl Env for Distractors {
    fn spec(&self) -> EnvSpec {
        let s = self.inner.spec();
        EnvSpec { obs_dim: s.obs_dim + self.state.len(), ..s }
    }

    fn reset(&mut self) -> Result<Vec<f64>> {
        let obs = self.inner.reset()?;
        // stationary start
        let sd = self.sigma / (1.0 - self.rho * self.rho).sqrt();
        for x in &mut self.state {
            *x = sd * standard_normal(&mut self.rng);
        }
        Ok(self.extend(obs))
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let mut out = self.inner.step(action)?;
        for x in &mut self.state {
            *x = self.rho * *x + self.sigma * standard_normal(&mut self.rng);
        }
        out.obs = self.extend(std::mem::take(&mut out.obs));
        Ok(out)
    }

    fn set_mass_scale(&mut self, k: f64) -> Result<()> {
        self.inner.set_mass_scale(k)
    }

    fn reward_range(&self) -> (f64, f64) {
        self.inner.reward_range()
    }
}
