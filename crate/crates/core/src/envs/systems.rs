use std::f64::consts::PI;

use rand::Rng;

use super::{check_action, check_mass_scale, Env, EnvSpec, StepOutcome, DT};
use crate::error::{MtcError, Result};
use crate::rng::{stream, StreamRng};

/// Step counter shared by the base systems.
#[derive(Clone, Debug)]
struct Clock {
    t: usize,
    horizon: usize,
}

impl Clock {
    fn tick(&mut self) -> bool {
        self.t += 1;
        self.t >= self.horizon
    }
}

fn check_finite(state: &[f64], name: &str) -> Result<()> {
    if state.iter().any(|x| !x.is_finite()) {
        return Err(MtcError::Numerical(format!("{name} simulation fault: state {state:?}")));
    }
    Ok(())
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let w = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PendulumParams {
    pub gravity: f64,
    pub length: f64,
    pub mass: f64,
    pub max_torque: f64,
    pub damping: f64,
    pub max_speed: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self { gravity: 10.0, length: 1.0, mass: 1.0, max_torque: 2.0, damping: 0.1, max_speed: 8.0 }
    }
}

/// Torque-limited pendulum; `θ = 0` is upright. Observation `(cos θ, sin θ, θ̇)`.
#[derive(Clone, Debug)]
pub struct Pendulum {
    pub params: PendulumParams,
    theta: f64,
    theta_dot: f64,
    mass_scale: f64,
    mass: f64,
    clock: Clock,
    rng: StreamRng,
}

impl Pendulum {
    pub fn new(params: PendulumParams, seed: u64, horizon: usize) -> Result<Self> {
        EnvSpec::new(3, 1, horizon)?;
        Ok(Self {
            params,
            theta: PI,
            theta_dot: 0.0,
            mass_scale: 1.0,
            mass: params.mass,
            clock: Clock { t: 0, horizon },
            rng: stream(seed, "env.pendulum"),
        })
    }

    pub fn state(&self) -> (f64, f64) {
        (self.theta, self.theta_dot)
    }

    pub fn set_state(&mut self, theta: f64, theta_dot: f64) {
        self.theta = theta;
        self.theta_dot = theta_dot;
    }

    /// Effective mass used by the integrator.
    pub fn mass(&self) -> f64 {
        self.mass
    }

    /// `θ̈ = (g/l) sin θ + a·τ_max/(m l²) − c θ̇`.
    pub fn angular_acceleration(&self, theta: f64, theta_dot: f64, a: f64) -> f64 {
        let p = &self.params;
        (p.gravity / p.length) * theta.sin() + a * p.max_torque / (self.mass * p.length * p.length) - p.damping * theta_dot
    }

    /// `½ m l² θ̇² + m g l cos θ`.
    pub fn energy(&self) -> f64 {
        let p = &self.params;
        0.5 * self.mass * p.length * p.length * self.theta_dot.powi(2) + self.mass * p.gravity * p.length * self.theta.cos()
    }

    fn obs(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }
}

impl Env for Pendulum {
    fn spec(&self) -> EnvSpec {
        EnvSpec { obs_dim: 3, act_dim: 1, horizon: self.clock.horizon }
    }

    fn reset(&mut self) -> Result<Vec<f64>> {
        self.mass = self.params.mass * self.mass_scale;
        self.theta = self.rng.random_range(-PI..PI);
        self.theta_dot = self.rng.random_range(-1.0..1.0);
        self.clock.t = 0;
        Ok(self.obs())
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        check_action(action, 1)?;
        let a = action[0];
        let err = wrap_angle(self.theta);
        let reward = -(err * err + 0.1 * self.theta_dot * self.theta_dot + 0.001 * a * a);
        let acc = self.angular_acceleration(self.theta, self.theta_dot, a);
        let max = self.params.max_speed;
        self.theta_dot = (self.theta_dot + acc * DT).clamp(-max, max);
        self.theta += self.theta_dot * DT;
        check_finite(&[self.theta, self.theta_dot], "pendulum")?;
        let truncated = self.clock.tick();
        Ok(StepOutcome { obs: self.obs(), reward, done: false, truncated })
    }

    fn set_mass_scale(&mut self, k: f64) -> Result<()> {
        check_mass_scale(k)?;
        self.mass_scale = k;
        Ok(())
    }

    fn reward_range(&self) -> (f64, f64) {
        let max = self.params.max_speed;
        (-(PI * PI + 0.1 * max * max + 0.001), 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointMassParams {
    pub mass: f64,
    pub max_force: f64,
    pub damping: f64,
    pub bound: f64,
    pub max_speed: f64,
}

impl Default for PointMassParams {
    fn default() -> Self {
        Self { mass: 1.0, max_force: 2.0, damping: 1.0, bound: 2.0, max_speed: 4.0 }
    }
}

/// Planar point mass driven toward the origin. Observation `(x, y, ẋ, ẏ)`.
#[derive(Clone, Debug)]
pub struct PointMass {
    pub params: PointMassParams,
    pos: [f64; 2],
    vel: [f64; 2],
    mass_scale: f64,
    mass: f64,
    clock: Clock,
    rng: StreamRng,
}

impl PointMass {
    pub fn new(params: PointMassParams, seed: u64, horizon: usize) -> Result<Self> {
        EnvSpec::new(4, 2, horizon)?;
        Ok(Self {
            params,
            pos: [0.0; 2],
            vel: [0.0; 2],
            mass_scale: 1.0,
            mass: params.mass,
            clock: Clock { t: 0, horizon },
            rng: stream(seed, "env.pointmass"),
        })
    }

    pub fn set_state(&mut self, pos: [f64; 2], vel: [f64; 2]) {
        self.pos = pos;
        self.vel = vel;
    }

    pub fn state(&self) -> ([f64; 2], [f64; 2]) {
        (self.pos, self.vel)
    }

    /// `(F a − c v) / m` per axis.
    pub fn acceleration(&self, vel: [f64; 2], action: &[f64]) -> [f64; 2] {
        let p = &self.params;
        [0, 1].map(|i| (p.max_force * action[i] - p.damping * vel[i]) / self.mass)
    }

    fn obs(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }
}

impl Env for PointMass {
    fn spec(&self) -> EnvSpec {
        EnvSpec { obs_dim: 4, act_dim: 2, horizon: self.clock.horizon }
    }

    fn reset(&mut self) -> Result<Vec<f64>> {
        self.mass = self.params.mass * self.mass_scale;
        self.pos = [self.rng.random_range(-1.0..1.0), self.rng.random_range(-1.0..1.0)];
        self.vel = [0.0; 2];
        self.clock.t = 0;
        Ok(self.obs())
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        check_action(action, 2)?;
        let sq = |v: [f64; 2]| v[0] * v[0] + v[1] * v[1];
        let reward = -(sq(self.pos) + 0.1 * sq(self.vel) + 0.001 * (action[0] * action[0] + action[1] * action[1]));
        let acc = self.acceleration(self.vel, action);
        let (b, vmax) = (self.params.bound, self.params.max_speed);
        for i in 0..2 {
            self.vel[i] = (self.vel[i] + acc[i] * DT).clamp(-vmax, vmax);
            self.pos[i] += self.vel[i] * DT;
            if self.pos[i].abs() > b {
                self.pos[i] = self.pos[i].clamp(-b, b);
                self.vel[i] = 0.0;
            }
        }
        check_finite(&self.obs(), "pointmass")?;
        let truncated = self.clock.tick();
        Ok(StepOutcome { obs: self.obs(), reward, done: false, truncated })
    }

    fn set_mass_scale(&mut self, k: f64) -> Result<()> {
        check_mass_scale(k)?;
        self.mass_scale = k;
        Ok(())
    }

    fn reward_range(&self) -> (f64, f64) {
        let (b, v) = (self.params.bound, self.params.max_speed);
        (-(2.0 * b * b + 0.2 * v * v + 0.002), 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MassSpringParams {
    pub mass: f64,
    pub stiffness: f64,
    pub damping: f64,
    pub max_force: f64,
    pub reference: f64,
    pub bound: f64,
    pub max_speed: f64,
}

impl Default for MassSpringParams {
    fn default() -> Self {
        Self { mass: 1.0, stiffness: 4.0, damping: 0.4, max_force: 4.0, reference: 0.5, bound: 3.0, max_speed: 10.0 }
    }
}

/// Mass on a spring anchored at 0, tracking a fixed reference position.
/// Observation `(x, ẋ)`.
#[derive(Clone, Debug)]
pub struct MassSpring {
    pub params: MassSpringParams,
    x: f64,
    v: f64,
    mass_scale: f64,
    mass: f64,
    clock: Clock,
    rng: StreamRng,
}

impl MassSpring {
    pub fn new(params: MassSpringParams, seed: u64, horizon: usize) -> Result<Self> {
        EnvSpec::new(2, 1, horizon)?;
        Ok(Self {
            params,
            x: 0.0,
            v: 0.0,
            mass_scale: 1.0,
            mass: params.mass,
            clock: Clock { t: 0, horizon },
            rng: stream(seed, "env.massspring"),
        })
    }

    pub fn set_state(&mut self, x: f64, v: f64) {
        self.x = x;
        self.v = v;
    }

    pub fn state(&self) -> (f64, f64) {
        (self.x, self.v)
    }

    /// `(F a − k x − c v) / m`.
    pub fn acceleration(&self, x: f64, v: f64, a: f64) -> f64 {
        let p = &self.params;
        (p.max_force * a - p.stiffness * x - p.damping * v) / self.mass
    }
}

impl Env for MassSpring {
    fn spec(&self) -> EnvSpec {
        EnvSpec { obs_dim: 2, act_dim: 1, horizon: self.clock.horizon }
    }

    fn reset(&mut self) -> Result<Vec<f64>> {
        self.mass = self.params.mass * self.mass_scale;
        self.x = self.rng.random_range(-1.0..1.0);
        self.v = 0.0;
        self.clock.t = 0;
        Ok(vec![self.x, self.v])
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        check_action(action, 1)?;
        let a = action[0];
        let p = self.params;
        let e = self.x - p.reference;
        let reward = -(e * e + 0.1 * self.v * self.v + 0.001 * a * a);
        let acc = self.acceleration(self.x, self.v, a);
        self.v = (self.v + acc * DT).clamp(-p.max_speed, p.max_speed);
        self.x += self.v * DT;
        if self.x.abs() > p.bound {
            self.x = self.x.clamp(-p.bound, p.bound);
            self.v = 0.0;
        }
        check_finite(&[self.x, self.v], "massspring")?;
        let truncated = self.clock.tick();
        Ok(StepOutcome { obs: vec![self.x, self.v], reward, done: false, truncated })
    }

    fn set_mass_scale(&mut self, k: f64) -> Result<()> {
        check_mass_scale(k)?;
        self.mass_scale = k;
        Ok(())
    }

    fn reward_range(&self) -> (f64, f64) {
        let p = &self.params;
        let e = p.bound + p.reference.abs();
        (-(e * e + 0.1 * p.max_speed * p.max_speed + 0.001), 0.0)
    }
}
