//! Loss surfaces of the regularized actor-critic: bound terms, the
//! information-regularized reward, critic and actor objectives, and the
//! updates of the dual multiplier and entropy temperature.
//!
//! All functions work on a [`WindowBatch`]; the transition used for the
//! critic and actor is the final one of each window so the predictors see
//! the full history.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{contract_err, MtcError, Result};
use crate::nn::gaussian::{atanh_tensor, squashed_log_prob_var};
use crate::nn::models::action_model_inputs;
use crate::nn::{Bind, GaussianVars, ModelSet};
use crate::rng::normal_vec;
use crate::window::WindowBatch;

/// Per-step bound terms, time-major (`t·B + b`).
#[derive(Clone, Debug, PartialEq)]
pub struct BoundTerms {
    pub steps: usize,
    pub batch: usize,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
}

impl BoundTerms {
    pub fn state_sum(&self) -> f64 {
        self.state.iter().sum()
    }

    pub fn action_sum(&self) -> f64 {
        self.action.iter().sum()
    }

    /// `(1 − m)·c_z + m·c_a` for every entry.
    pub fn mixed_terms(&self, m: f64) -> Result<Vec<f64>> {
        check_mix(m)?;
        Ok(self.state.iter().zip(&self.action).map(|(z, a)| (1.0 - m) * z + m * a).collect())
    }

    /// Terms of the last step of each window.
    pub fn final_step(&self) -> BoundTerms {
        let from = (self.steps - 1) * self.batch;
        BoundTerms { steps: 1, batch: self.batch, state: self.state[from..].to_vec(), action: self.action[from..].to_vec() }
    }

    pub fn is_finite(&self) -> bool {
        self.state.iter().chain(&self.action).all(|x| x.is_finite())
    }
}

fn check_mix(m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(MtcError::Config(format!("bound mixing coefficient {m} outside [0, 1]")));
    }
    Ok(())
}

/// `(1 − m)·Σ c_z + m·Σ c_a`.
pub fn mixed_bound(terms: &BoundTerms, m: f64) -> Result<f64> {
    check_mix(m)?;
    Ok((1.0 - m) * terms.state_sum() + m * terms.action_sum())
}

/// `r* = r + α·(c_z + c_a)`.
pub fn regularized_reward(r: f64, c_z: f64, c_a: f64, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(MtcError::Config(format!("alpha must be finite and non-negative, got {alpha}")));
    }
    let bonus = alpha * (c_z + c_a);
    if !bonus.is_finite() || !r.is_finite() {
        return Err(MtcError::Numerical(format!("non-finite regularized reward: r={r} c_z={c_z} c_a={c_a} alpha={alpha}")));
    }
    Ok(r + bonus)
}

/// Which window steps get bound terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Steps {
    All,
    Final,
}

/// Bound terms as tape values, one row per (step, window).
#[derive(Clone, Copy, Debug)]
pub struct BoundGraph {
    pub steps: usize,
    /// `log q(z_{t+1} | history)`
    pub log_q_next: Var,
    /// `log f(z_{t+1} | s_{t+1})`
    pub log_f_next: Var,
    pub state_terms: Var,
    /// `log q_χ(a_t | history)`, when the run has an action model.
    pub log_q_action: Option<Var>,
    /// `log π(a_t | s_t)` of the replayed action (policy parameters frozen).
    pub log_pi_action: Option<Var>,
    pub action_terms: Option<Var>,
}

/// Standard normal noise for the encoder, one row per state of the batch.
pub fn latent_noise(rng: &mut impl Rng, batch: &WindowBatch, latent_dim: usize) -> Tensor {
    let rows = (batch.horizon + 1) * batch.batch;
    Tensor::matrix(rows, latent_dim, normal_vec(rng, rows * latent_dim)).expect("finite noise")
}

/// Standard normal noise for one batch of policy samples.
pub fn action_noise(rng: &mut impl Rng, rows: usize, act_dim: usize) -> Tensor {
    Tensor::matrix(rows, act_dim, normal_vec(rng, rows * act_dim)).expect("finite noise")
}

fn slice_dist(tape: &mut Tape, d: &GaussianVars, start: usize, end: usize) -> Result<GaussianVars> {
    Ok(GaussianVars { mean: tape.slice_rows(d.mean, start, end)?, log_std: tape.slice_rows(d.log_std, start, end)? })
}

fn row_block(t: &Tensor, start: usize, end: usize) -> Tensor {
    let c = t.cols();
    Tensor::matrix(end - start, c, t.data()[start * c..end * c].to_vec()).expect("finite slice")
}

/// Builds the bound terms on `tape`.
///
/// `repr` controls whether encoder and predictor parameters receive
/// gradients; the policy density inside the action terms is always a
/// constant here (the actor adds its own policy term).
pub fn bound_graph(tape: &mut Tape, models: &ModelSet, batch: &WindowBatch, latent_eps: Tensor, steps: Steps, repr: Bind) -> Result<BoundGraph> {
    let encoder = models.encoder.as_ref().ok_or_else(|| MtcError::Contract("run has no encoder".into()))?;
    let (h, b) = (batch.horizon, batch.batch);
    if h == 0 {
        return contract_err("window shorter than 2 states");
    }
    let store = &models.store;
    let states = tape.input(batch.states.clone());
    let (z_all, f_all) = encoder.encode(tape, store, states, latent_eps, repr)?;
    let (first, n) = match steps {
        Steps::All => (0, h),
        Steps::Final => (h - 1, 1),
    };
    let emit: Vec<usize> = (first..h).collect();

    // log f(z_{k+1} | s_{k+1}) for the emitted k
    let f_next = slice_dist(tape, &f_all, (first + 1) * b, (h + 1) * b)?;
    let z_next = tape.slice_rows(z_all, (first + 1) * b, (h + 1) * b)?;
    let log_f_next = f_next.log_prob(tape, z_next)?;

    let z: Vec<Var> = (0..=h).map(|k| tape.slice_rows(z_all, k * b, (k + 1) * b)).collect::<Result<_>>()?;
    let a: Vec<Var> = (0..h).map(|k| tape.input(batch.action_block(k))).collect();

    let q_next = if let Some(dynamics) = &models.dynamics {
        let inputs = z[..h].iter().zip(&a).map(|(&zk, &ak)| tape.concat_cols(&[zk, ak])).collect::<Result<Vec<_>>>()?;
        dynamics.run(tape, store, &inputs, &emit, repr)?
    } else if let Some(one_step) = &models.one_step {
        let zk = tape.slice_rows(z_all, first * b, h * b)?;
        let ak = tape.input(row_block(&batch.actions, first * b, h * b));
        one_step.predict(tape, store, zk, ak, repr)?
    } else {
        return contract_err("run has no latent dynamics model");
    };
    let log_q_next = q_next.log_prob(tape, z_next)?;
    let state_terms = tape.sub(log_q_next, log_f_next)?;

    let (mut log_q_action, mut log_pi_action, mut action_terms) = (None, None, None);
    if let Some(action_model) = &models.action_model {
        let inputs = action_model_inputs(tape, &z[..h], &a[..h - 1], models.arch.act_dim)?;
        let dist = action_model.run(tape, store, &inputs, &emit, repr)?;
        let replayed = row_block(&batch.actions, first * b, h * b);
        let u = tape.input(atanh_tensor(&replayed));
        let lq = squashed_log_prob_var(tape, &dist, u)?;
        let s = tape.input(row_block(&batch.states, first * b, h * b));
        let lp = models.policy.log_prob_of(tape, store, s, &replayed, Bind::Frozen)?;
        action_terms = Some(tape.sub(lq, lp)?);
        log_q_action = Some(lq);
        log_pi_action = Some(lp);
    }
    Ok(BoundGraph { steps: n, log_q_next, log_f_next, state_terms, log_q_action, log_pi_action, action_terms })
}

pub fn graph_terms(tape: &Tape, g: &BoundGraph, batch: usize) -> BoundTerms {
    let state = tape.value(g.state_terms).data().to_vec();
    let action = match g.action_terms {
        Some(v) => tape.value(v).data().to_vec(),
        None => vec![0.0; state.len()],
    };
    BoundTerms { steps: g.steps, batch, state, action }
}

fn numeric_bound(batch: &WindowBatch, models: &ModelSet, rng: &mut impl Rng) -> Result<BoundTerms> {
    let mut tape = Tape::new();
    let eps = latent_noise(rng, batch, models.arch.latent_dim);
    let g = bound_graph(&mut tape, models, batch, eps, Steps::All, Bind::Frozen)?;
    let terms = graph_terms(&tape, &g, batch.batch);
    if !terms.is_finite() {
        return Err(MtcError::Numerical(format!("non-finite bound terms for {}", batch.describe(0))));
    }
    Ok(terms)
}

/// History-conditioned bound terms at every step of every window, with
/// latents drawn from the current encoder.
pub fn tc_bound_terms(batch: &WindowBatch, models: &ModelSet, rng: &mut impl Rng) -> Result<BoundTerms> {
    if models.dynamics.is_none() {
        return contract_err("history bound needs a history dynamics model");
    }
    numeric_bound(batch, models, rng)
}

/// State-only bound terms from the one-step model; action terms are zero.
pub fn rpc_bound_terms(batch: &WindowBatch, models: &ModelSet, rng: &mut impl Rng) -> Result<BoundTerms> {
    if models.one_step.is_none() {
        return contract_err("one-step bound needs a one-step dynamics model");
    }
    numeric_bound(batch, models, rng)
}

/// Soft TD target `r* + γ(1 − d)(min Q' − β'·log π')`.
pub fn soft_td_target(r_star: f64, done: f64, gamma: f64, next_min_q: f64, next_log_pi: f64, beta: f64) -> f64 {
    if done == 1.0 {
        return r_star;
    }
    r_star + gamma * (1.0 - done) * (next_min_q - beta * next_log_pi)
}

#[derive(Clone, Debug)]
pub struct CriticOutput {
    pub loss: Var,
    pub targets: Vec<f64>,
}

/// Twin-critic squared error against the soft TD target of the final
/// transition of each window. Only critic parameters receive gradients.
pub fn critic_loss(tape: &mut Tape, models: &ModelSet, batch: &WindowBatch, r_star: &[f64], next_eps: Tensor, gamma: f64, beta: f64) -> Result<CriticOutput> {
    let (h, b) = (batch.horizon, batch.batch);
    if batch.dones.len() != h * b || r_star.len() != b {
        return contract_err(format!("critic needs {b} rewards and {} done flags", h * b));
    }
    let store = &models.store;
    let s_next = tape.input(batch.state_block(h));
    let (a_next, lp_next) = models.policy.sample(tape, store, s_next, next_eps, Bind::Frozen)?;
    let q1n = models.q1_target.q(tape, store, s_next, a_next, Bind::Frozen)?;
    let q2n = models.q2_target.q(tape, store, s_next, a_next, Bind::Frozen)?;
    let min_qn = tape.minimum(q1n, q2n)?;
    let dones = batch.final_dones();
    let targets: Vec<f64> = (0..b)
        .map(|i| soft_td_target(r_star[i], dones[i], gamma, tape.value(min_qn).data()[i], tape.value(lp_next).data()[i], beta))
        .collect();
    let y = tape.input(Tensor::matrix(b, 1, targets.clone())?);
    let s = tape.input(batch.state_block(h - 1));
    let a = tape.input(batch.action_block(h - 1));
    let q1 = models.q1.q(tape, store, s, a, Bind::Train)?;
    let q2 = models.q2.q(tape, store, s, a, Bind::Train)?;
    let e1 = tape.sub(q1, y)?;
    let e1 = tape.square(e1)?;
    let e2 = tape.sub(q2, y)?;
    let e2 = tape.square(e2)?;
    let m1 = tape.mean(e1)?;
    let m2 = tape.mean(e2)?;
    let loss = tape.add(m1, m2)?;
    Ok(CriticOutput { loss, targets })
}

#[derive(Clone, Copy, Debug)]
pub struct ActorParams {
    pub alpha: f64,
    /// Entropy temperature `β' = β + α`.
    pub beta: f64,
    pub gamma: f64,
    pub m: f64,
    /// Whether encoder and predictors receive gradients.
    pub representation: Bind,
}

#[derive(Clone, Debug)]
pub struct ActorOutput {
    /// Batch-mean objective (to maximize).
    pub objective: Var,
    /// Per-window entropy-regularized Q part.
    pub sac_terms: Var,
    /// Per-window `(1 − m)·c_z + m·log q_χ(a_t | ·)` at the final step.
    pub bonus: Option<Var>,
    pub bound: Option<BoundGraph>,
    /// `log π(ã | s_{t+1})` of the freshly sampled next action.
    pub log_pi_next: Var,
}

/// Reparameterization noise of the actor objective, one draw for `s_t` and
/// one for `s_{t+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNoise {
    pub now: Tensor,
    pub next: Tensor,
}

pub fn policy_noise(rng: &mut impl Rng, rows: usize, act_dim: usize) -> PolicyNoise {
    let now = action_noise(rng, rows, act_dim);
    PolicyNoise { now, next: action_noise(rng, rows, act_dim) }
}

/// Per-window `−β'·log π(â|s_t) + γ·(min Q(s_{t+1}, ã) − β'·log π(ã|s_{t+1}))`
/// with Q held fixed and both actions drawn from the current policy; returns
/// `(terms, log π(ã|s_{t+1}))`.
///
/// The density at `s_t` is taken at a fresh sample rather than the replayed
/// action: `−log π` of a fixed action grows without bound as the policy mean
/// moves away from it, and maximizing it diverges.
fn sac_terms(tape: &mut Tape, models: &ModelSet, batch: &WindowBatch, noise: PolicyNoise, beta: f64, gamma: f64) -> Result<(Var, Var)> {
    let h = batch.horizon;
    if h == 0 {
        return contract_err("window shorter than 2 states");
    }
    let store = &models.store;
    let s = tape.input(batch.state_block(h - 1));
    let (_, lp_now) = models.policy.sample(tape, store, s, noise.now, Bind::Train)?;
    let s_next = tape.input(batch.state_block(h));
    let (a_next, lp_next) = models.policy.sample(tape, store, s_next, noise.next, Bind::Train)?;
    let q1 = models.q1.q(tape, store, s_next, a_next, Bind::Frozen)?;
    let q2 = models.q2.q(tape, store, s_next, a_next, Bind::Frozen)?;
    let min_q = tape.minimum(q1, q2)?;
    let ent_next = tape.scale(lp_next, beta)?;
    let soft_v = tape.sub(min_q, ent_next)?;
    let future = tape.scale(soft_v, gamma)?;
    let now = tape.scale(lp_now, -beta)?;
    Ok((tape.add(now, future)?, lp_next))
}

/// Plain entropy-regularized actor objective, no information terms.
pub fn sac_actor_objective(tape: &mut Tape, models: &ModelSet, batch: &WindowBatch, noise: PolicyNoise, beta: f64, gamma: f64) -> Result<ActorOutput> {
    let (terms, log_pi_next) = sac_terms(tape, models, batch, noise, beta, gamma)?;
    let objective = tape.mean(terms)?;
    Ok(ActorOutput { objective, sac_terms: terms, bonus: None, bound: None, log_pi_next })
}

/// Regularized actor objective at the final step of each window.
///
/// The replayed action's policy density is folded into the `β'` coefficient,
/// so the information part contributes `α·((1 − m)·c_z + m·log q_χ)`.
/// Gradients reach the policy and, with `representation = Train`, the
/// encoder and predictors; critics are constants.
pub fn actor_objective(tape: &mut Tape, models: &ModelSet, batch: &WindowBatch, latent_eps: Tensor, noise: PolicyNoise, p: ActorParams) -> Result<ActorOutput> {
    check_mix(p.m)?;
    let bound = match models.encoder {
        Some(_) => Some(bound_graph(tape, models, batch, latent_eps, Steps::Final, p.representation)?),
        None => None,
    };
    actor_objective_with(tape, models, batch, bound, noise, p)
}

/// As [`actor_objective`], with the final-step bound graph already on `tape`.
/// Without a graph this is the plain entropy-regularized objective.
pub fn actor_objective_with(tape: &mut Tape, models: &ModelSet, batch: &WindowBatch, bound: Option<BoundGraph>, noise: PolicyNoise, p: ActorParams) -> Result<ActorOutput> {
    check_mix(p.m)?;
    let (terms, log_pi_next) = sac_terms(tape, models, batch, noise, p.beta, p.gamma)?;
    let Some(g) = bound else {
        let objective = tape.mean(terms)?;
        return Ok(ActorOutput { objective, sac_terms: terms, bonus: None, bound: None, log_pi_next });
    };
    if g.steps != 1 {
        return contract_err("actor objective needs a final-step bound graph");
    }
    let state_part = tape.scale(g.state_terms, 1.0 - p.m)?;
    let bonus = match g.log_q_action {
        Some(lq) => {
            let action_part = tape.scale(lq, p.m)?;
            tape.add(state_part, action_part)?
        }
        None => state_part,
    };
    let weighted = tape.scale(bonus, p.alpha)?;
    let total = tape.add(terms, weighted)?;
    let objective = tape.mean(total)?;
    Ok(ActorOutput { objective, sac_terms: terms, bonus: Some(bonus), bound: Some(g), log_pi_next })
}

/// Values of the final-step bound terms held by an actor graph.
pub fn actor_bound_terms(tape: &Tape, out: &ActorOutput, batch: usize) -> Option<BoundTerms> {
    out.bound.as_ref().map(|g| graph_terms(tape, g, batch))
}

/// `L(α) = α·(b̄ − I_p)` with `α = exp(log α)`.
pub fn dual_alpha_loss(tape: &mut Tape, store: &ParamStore, log_alpha: ParamId, bound_estimate: f64, target: f64) -> Result<Var> {
    let la = tape.param(store, log_alpha);
    let alpha = tape.exp(la)?;
    tape.scale(alpha, bound_estimate - target)
}

/// `β'·mean(−log π − H̄)` over `log β'`.
pub fn entropy_temperature_loss(tape: &mut Tape, store: &ParamStore, log_beta: ParamId, log_probs: &[f64], target_entropy: f64) -> Result<Var> {
    if log_probs.is_empty() {
        return contract_err("temperature loss needs at least one log-probability");
    }
    let gap = log_probs.iter().map(|lp| -lp - target_entropy).sum::<f64>() / log_probs.len() as f64;
    let lb = tape.param(store, log_beta);
    let beta = tape.exp(lb)?;
    tape.scale(beta, gap)
}
