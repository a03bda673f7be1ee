//! Update step, collection loop and run orchestration.

use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::autodiff::{Adam, AdamConfig, Checkpoint, ParamId, ParamStore, Tape, Tensor};
use crate::config::{Algo, TrainConfig};
use crate::envs::{make_env, Env, Transition};
use crate::error::{MtcError, Result};
use crate::eval::{ci90, mean, rollout, trajectory_text, RolloutReport};
use crate::nn::{Architecture, Bind, ModelSet};
use crate::objective::{
    action_noise, actor_objective_with, bound_graph, critic_loss, dual_alpha_loss, entropy_temperature_loss, graph_terms,
    latent_noise, policy_noise, regularized_reward, ActorParams, Steps,
};
use crate::replay::ReplayBuffer;
use crate::rng::{derive_seed, stream, StreamRng};
use crate::util::{fmt_g9, fnv1a};
use crate::window::WindowBatch;

pub const METRICS_HEADER: &str = "step,episode_return,critic_loss,actor_obj,bound_mean,c_z_mean,c_a_mean,alpha,beta_prime,entropy";
pub const EVAL_HEADER: &str = "step,mean_return,ci90";

/// Scalars of one update. Values a given algorithm does not compute are NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_obj: f64,
    pub bound_mean: f64,
    pub c_z_mean: f64,
    pub c_a_mean: f64,
    pub alpha: f64,
    pub beta_prime: f64,
    pub entropy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Diagnostics {
    pub step: u64,
    /// Return of the most recently finished episode.
    pub episode_return: f64,
    pub stats: UpdateStats,
}

impl Diagnostics {
    pub fn csv_row(&self) -> String {
        let s = &self.stats;
        let vals = [self.episode_return, s.critic_loss, s.actor_obj, s.bound_mean, s.c_z_mean, s.c_a_mean, s.alpha, s.beta_prime, s.entropy];
        let mut row = self.step.to_string();
        for v in vals {
            row.push(',');
            row.push_str(&fmt_g9(v));
        }
        row
    }
}

#[derive(Clone, Debug)]
pub struct Optimizers {
    pub critic: Adam,
    pub policy: Adam,
    pub representation: Option<Adam>,
    pub alpha: Adam,
    pub temperature: Adam,
}

impl Optimizers {
    fn groups(&self) -> Vec<(&'static str, &Adam)> {
        let mut g = vec![("critic", &self.critic), ("policy", &self.policy), ("alpha", &self.alpha), ("temperature", &self.temperature)];
        if let Some(r) = &self.representation {
            g.push(("representation", r));
        }
        g
    }

    fn groups_mut(&mut self) -> Vec<(&'static str, &mut Adam)> {
        let mut g = vec![
            ("critic", &mut self.critic),
            ("policy", &mut self.policy),
            ("alpha", &mut self.alpha),
            ("temperature", &mut self.temperature),
        ];
        if let Some(r) = &mut self.representation {
            g.push(("representation", r));
        }
        g
    }
}

/// Architecture implied by a config for the given dimensions.
pub fn architecture(config: &TrainConfig, obs_dim: usize, act_dim: usize) -> Architecture {
    Architecture {
        obs_dim,
        act_dim,
        latent_dim: config.latent_dim,
        hidden: config.hidden,
        rnn_hidden: config.rnn_hidden,
        rnn_out: config.latent_dim,
        output_norm: config.output_norm,
        representation: config.algo.representation(),
    }
}

/// Rescales the gradients of `ids` so their joint norm is at most `max_norm`.
fn clip_grad_norm(store: &mut ParamStore, ids: &[ParamId], max_norm: f64) {
    let sq: f64 = ids.iter().filter_map(|&id| store.get(id).grad()).flatten().map(|g| g * g).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for &id in ids {
            if let Some(g) = store.get_mut(id).take_grad() {
                let scaled: Vec<f64> = g.iter().map(|x| x * k).collect();
                store.get_mut(id).accumulate_grad(&scaled);
            }
        }
    }
}

/// Hex digest of every parameter, for fault reports.
pub fn model_checksum(models: &ModelSet) -> String {
    let mut bytes = Vec::new();
    for (_, name, t) in models.store.iter() {
        bytes.extend_from_slice(name.as_bytes());
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    format!("{:016x}", fnv1a(&bytes))
}

/// First window row holding a non-finite state, action or reward.
fn non_finite_row(batch: &WindowBatch) -> Option<usize> {
    let b = batch.batch;
    let bad = |data: &[f64], width: usize| data.chunks(width).position(|r| r.iter().any(|x| !x.is_finite())).map(|i| i % b);
    bad(batch.states.data(), batch.obs_dim())
        .or_else(|| bad(batch.actions.data(), batch.act_dim()))
        .or_else(|| bad(&batch.rewards, 1))
        .or_else(|| bad(&batch.dones, 1))
}

/// Models, optimizers and the update-time random streams.
pub struct Learner {
    pub models: ModelSet,
    pub opt: Optimizers,
    pub updates: u64,
    gamma: f64,
    tau: f64,
    m: f64,
    ip: f64,
    target_entropy: f64,
    actor_update_freq: u64,
    target_update_freq: u64,
    grad_clip: Option<f64>,
    /// Information terms shape the updates (false for SAC and for a
    /// disabled regularizer).
    regularized: bool,
    policy_rng: StreamRng,
    encoder_rng: StreamRng,
}

impl Learner {
    pub fn new(config: &TrainConfig, obs_dim: usize, act_dim: usize) -> Result<Self> {
        config.validate()?;
        let arch = architecture(config, obs_dim, act_dim);
        let models = ModelSet::new(arch, config.seed, config.init_alpha, config.init_temperature)?;
        Ok(Self::with_models(config, models))
    }

    pub fn with_models(config: &TrainConfig, models: ModelSet) -> Self {
        let adam = |lr: f64, params: Vec<ParamId>| Adam::new(AdamConfig { lr, ..AdamConfig::default() }, params, &models.store);
        let repr = models.representation_params();
        let opt = Optimizers {
            critic: adam(config.critic_lr, models.critic_params()),
            policy: adam(config.actor_lr, models.policy_params()),
            representation: (!repr.is_empty()).then(|| adam(config.repr_lr, repr)),
            alpha: adam(config.alpha_lr, vec![models.log_alpha]),
            temperature: adam(config.temperature_lr, vec![models.log_beta]),
        };
        let act_dim = models.arch.act_dim;
        Self {
            opt,
            updates: 0,
            gamma: config.gamma,
            tau: config.tau,
            m: config.m_effective(),
            ip: config.ip,
            target_entropy: config.target_entropy_for(act_dim),
            actor_update_freq: config.actor_update_freq,
            target_update_freq: config.target_update_freq,
            grad_clip: config.grad_clip,
            regularized: config.algo != Algo::Sac && config.regularizer,
            policy_rng: stream(config.seed, "policy"),
            encoder_rng: stream(config.seed, "encoder"),
            models,
        }
    }

    pub fn regularized(&self) -> bool {
        self.regularized
    }

    /// α as used in the updates: zero when the regularizer is off.
    pub fn effective_alpha(&self) -> f64 {
        if self.regularized {
            self.models.alpha()
        } else {
            0.0
        }
    }

    fn fault(&self, what: &str, batch: &WindowBatch, row: usize) -> MtcError {
        MtcError::Numerical(format!(
            "non-finite {what} at update {}; {}; model checksum {}",
            self.updates,
            batch.describe(row),
            model_checksum(&self.models)
        ))
    }

    fn step_group(&mut self, group: &str) -> Result<()> {
        let ids = match group {
            "critic" => self.opt.critic.params().to_vec(),
            "policy" => self.opt.policy.params().to_vec(),
            _ => self.opt.representation.as_ref().map(|o| o.params().to_vec()).unwrap_or_default(),
        };
        if let Some(c) = self.grad_clip {
            clip_grad_norm(&mut self.models.store, &ids, c);
        }
        let store = &mut self.models.store;
        match group {
            "critic" => self.opt.critic.apply(store),
            "policy" => self.opt.policy.apply(store),
            _ => match &mut self.opt.representation {
                Some(o) => o.apply(store),
                None => Ok(()),
            },
        }
    }

    /// One full update on a batch of windows: critic, then actor and
    /// representation, target critics, α and β'.
    pub fn update(&mut self, batch: &WindowBatch) -> Result<UpdateStats> {
        let b = batch.batch;
        let alpha = self.effective_alpha();
        let beta = self.models.beta_prime();
        let has_repr = self.models.encoder.is_some();
        let do_actor = self.updates % self.actor_update_freq == 0;
        if let Some(row) = non_finite_row(batch) {
            return Err(self.fault("batch data", batch, row));
        }

        // information terms at the final step, from the current models
        let mut actor_tape = Tape::new();
        let mut bound = None;
        let mut terms = None;
        if has_repr {
            let eps = latent_noise(&mut self.encoder_rng, batch, self.models.arch.latent_dim);
            let mode = if self.regularized && do_actor { Bind::Train } else { Bind::Frozen };
            let g = bound_graph(&mut actor_tape, &self.models, batch, eps, Steps::Final, mode)?;
            let t = graph_terms(&actor_tape, &g, b);
            if let Some(row) = t.state.iter().chain(&t.action).position(|x| !x.is_finite()) {
                return Err(self.fault("bound terms", batch, row % b));
            }
            bound = Some(g);
            terms = Some(t);
        }

        let rewards = batch.final_rewards();
        let r_star: Vec<f64> = match (&terms, self.regularized) {
            (Some(t), true) => (0..b)
                .map(|i| regularized_reward(rewards[i], (1.0 - self.m) * t.state[i], self.m * t.action[i], alpha))
                .collect::<Result<_>>()
                .map_err(|_| self.fault("regularized reward", batch, 0))?,
            _ => rewards.to_vec(),
        };
        if let Some(row) = r_star.iter().position(|x| !x.is_finite()) {
            return Err(self.fault("regularized reward", batch, row));
        }

        let act_dim = self.models.arch.act_dim;
        let mut tape = Tape::new();
        let next_eps = action_noise(&mut self.policy_rng, b, act_dim);
        let critic = critic_loss(&mut tape, &self.models, batch, &r_star, next_eps, self.gamma, beta)?;
        let critic_value = tape.value(critic.loss).item();
        if !critic_value.is_finite() {
            let row = critic.targets.iter().position(|y| !y.is_finite()).unwrap_or(0);
            return Err(self.fault("critic loss", batch, row));
        }
        tape.backward(critic.loss, &mut self.models.store)?;
        self.step_group("critic")?;

        let mut stats = UpdateStats {
            critic_loss: critic_value,
            actor_obj: f64::NAN,
            bound_mean: f64::NAN,
            c_z_mean: f64::NAN,
            c_a_mean: f64::NAN,
            alpha,
            beta_prime: beta,
            entropy: f64::NAN,
        };
        if let Some(t) = &terms {
            let mixed = t.mixed_terms(self.m)?;
            stats.bound_mean = mean(&mixed);
            stats.c_z_mean = mean(&t.state);
            stats.c_a_mean = mean(&t.action);
        }

        if do_actor {
            let noise = policy_noise(&mut self.policy_rng, b, act_dim);
            let params = ActorParams { alpha, beta, gamma: self.gamma, m: self.m, representation: Bind::Frozen };
            let linked = if self.regularized { bound } else { None };
            let out = actor_objective_with(&mut actor_tape, &self.models, batch, linked, noise, params)?;
            let objective = actor_tape.value(out.objective).item();
            if !objective.is_finite() {
                return Err(self.fault("actor objective", batch, 0));
            }
            let loss = actor_tape.neg(out.objective)?;
            actor_tape.backward(loss, &mut self.models.store)?;
            self.step_group("policy")?;
            if self.regularized {
                self.step_group("representation")?;
            }
            stats.actor_obj = objective;
            let log_pi_next = actor_tape.value(out.log_pi_next).data().to_vec();
            stats.entropy = -mean(&log_pi_next);

            if self.regularized && has_repr {
                let mut t = Tape::new();
                let l = dual_alpha_loss(&mut t, &self.models.store, self.models.log_alpha, stats.bound_mean, self.ip)?;
                t.backward(l, &mut self.models.store)?;
                self.opt.alpha.apply(&mut self.models.store)?;
            }
            let mut t = Tape::new();
            let l = entropy_temperature_loss(&mut t, &self.models.store, self.models.log_beta, &log_pi_next, self.target_entropy)?;
            t.backward(l, &mut self.models.store)?;
            self.opt.temperature.apply(&mut self.models.store)?;
        }

        if self.updates % self.target_update_freq == 0 {
            self.models.update_targets(self.tau)?;
        }
        self.updates += 1;
        stats.alpha = self.effective_alpha();
        stats.beta_prime = self.models.beta_prime();
        Ok(stats)
    }
}

fn rng_words(rng: &StreamRng) -> Vec<f64> {
    let w = rng.get_word_pos();
    (0..4).map(|i| ((w >> (32 * i)) & 0xffff_ffff) as f64).collect()
}

fn restore_words(rng: &mut StreamRng, t: &Tensor) {
    let w = t.data().iter().enumerate().fold(0u128, |acc, (i, &x)| acc | ((x as u128) << (32 * i)));
    rng.set_word_pos(w);
}

/// A training run: environment, replay buffer and learner.
pub struct Trainer {
    pub config: TrainConfig,
    pub learner: Learner,
    pub buffer: ReplayBuffer,
    env: Box<dyn Env>,
    collect_rng: StreamRng,
    replay_rng: StreamRng,
    obs: Vec<f64>,
    episode_return: f64,
    last_return: f64,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut env = make_env(&config.env, &config.perturbation, config.seed, config.horizon)?;
        let spec = env.spec();
        let learner = Learner::new(&config, spec.obs_dim, spec.act_dim)?;
        let buffer = ReplayBuffer::new(config.replay_capacity, spec.obs_dim, spec.act_dim)?;
        let obs = env.reset()?;
        Ok(Self {
            collect_rng: stream(config.seed, "collect"),
            replay_rng: stream(config.seed, "replay"),
            config,
            learner,
            buffer,
            env,
            obs,
            episode_return: 0.0,
            last_return: f64::NAN,
            step: 0,
        })
    }

    pub fn models(&self) -> &ModelSet {
        &self.learner.models
    }

    /// Collects one environment step and, past the initial steps, runs one
    /// update. Returns the diagnostics row when an update happened.
    pub fn train_step(&mut self) -> Result<Option<Diagnostics>> {
        let act_dim = self.env.spec().act_dim;
        let action: Vec<f64> = if self.step < self.config.init_steps {
            (0..act_dim).map(|_| self.collect_rng.random_range(-1.0..=1.0)).collect()
        } else {
            let m = &self.learner.models;
            m.policy.act(&m.store, &self.obs, &mut self.collect_rng)?.0.into_iter().map(|a| a.clamp(-1.0, 1.0)).collect()
        };
        let out = self.env.step(&action)?;
        let t = Transition {
            s: std::mem::take(&mut self.obs),
            a: action,
            r: out.reward,
            s_next: out.obs.clone(),
            d: out.done as u8 as f64,
            truncated: out.truncated,
        };
        self.buffer.push(&t)?;
        self.episode_return += out.reward;
        self.obs = if t.ends_episode() {
            self.last_return = self.episode_return;
            self.episode_return = 0.0;
            self.env.reset()?
        } else {
            out.obs
        };
        self.step += 1;
        if self.step <= self.config.init_steps {
            return Ok(None);
        }
        let batch = match self.buffer.sample_batch(self.config.batch_size, self.config.history, &mut self.replay_rng) {
            Ok(b) => b,
            Err(MtcError::NotReady(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let stats = self.learner.update(&batch)?;
        Ok(Some(Diagnostics { step: self.step, episode_return: self.last_return, stats }))
    }

    /// Mean-action evaluation on a fresh environment.
    pub fn evaluate(&self) -> Result<RolloutReport> {
        let seed = derive_seed(self.config.seed, "eval");
        rollout(self.models(), &self.config.env, &self.config.perturbation, self.config.eval_episodes, seed, self.config.horizon)
    }

    /// Everything needed to continue the run.
    pub fn state_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = self.learner.models.to_checkpoint();
        let finished = self.last_return.is_finite();
        let last = if finished { self.last_return } else { 0.0 };
        c.push("__step__", Tensor::new(vec![4], vec![self.step as f64, self.learner.updates as f64, finished as u8 as f64, last])?);
        for (name, rng) in [("collect", &self.collect_rng), ("replay", &self.replay_rng), ("policy", &self.learner.policy_rng), ("encoder", &self.learner.encoder_rng)] {
            c.push(format!("__rng__.{name}"), Tensor::new(vec![4], rng_words(rng))?);
        }
        for (group, adam) in self.learner.opt.groups() {
            let (m1, m2) = adam.moments();
            c.push(format!("__opt__.{group}.step"), Tensor::new(vec![1], vec![adam.step_count() as f64])?);
            for (i, (a, b)) in m1.iter().zip(m2).enumerate() {
                c.push(format!("__opt__.{group}.m1.{i}"), Tensor::new(vec![a.len()], a.clone())?);
                c.push(format!("__opt__.{group}.m2.{i}"), Tensor::new(vec![b.len()], b.clone())?);
            }
        }
        self.buffer.save_into(&mut c, "__replay__")?;
        Ok(c)
    }

    /// Continues from a state checkpoint. The environment starts a fresh
    /// episode from a seed derived from the saved step count.
    pub fn resume(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(config)?;
        let models = ModelSet::from_checkpoint(ckpt)?;
        let spec = t.env.spec();
        models.check_dims(spec.obs_dim, spec.act_dim)?;
        if models.arch != architecture(&t.config, spec.obs_dim, spec.act_dim) {
            return Err(MtcError::Checkpoint("checkpoint architecture differs from the run config".into()));
        }
        t.learner = Learner::with_models(&t.config, models);
        let counters = ckpt.expect("__step__", &[4])?.data().to_vec();
        t.step = counters[0] as u64;
        t.learner.updates = counters[1] as u64;
        t.last_return = if counters[2] == 1.0 { counters[3] } else { f64::NAN };
        restore_words(&mut t.collect_rng, ckpt.expect("__rng__.collect", &[4])?);
        restore_words(&mut t.replay_rng, ckpt.expect("__rng__.replay", &[4])?);
        restore_words(&mut t.learner.policy_rng, ckpt.expect("__rng__.policy", &[4])?);
        restore_words(&mut t.learner.encoder_rng, ckpt.expect("__rng__.encoder", &[4])?);
        for (group, adam) in t.learner.opt.groups_mut() {
            let step = ckpt.expect(&format!("__opt__.{group}.step"), &[1])?.item() as u64;
            let n = adam.params().len();
            let (mut m1, mut m2) = (Vec::with_capacity(n), Vec::with_capacity(n));
            for i in 0..n {
                let len = adam.moments().0[i].len();
                m1.push(ckpt.expect(&format!("__opt__.{group}.m1.{i}"), &[len])?.data().to_vec());
                m2.push(ckpt.expect(&format!("__opt__.{group}.m2.{i}"), &[len])?.data().to_vec());
            }
            adam.restore(m1, m2, step)?;
        }
        t.buffer = ReplayBuffer::load_from(ckpt, "__replay__")?;
        let env_seed = derive_seed(t.config.seed, &format!("resume.{}", t.step));
        t.env = make_env(&t.config.env, &t.config.perturbation, env_seed, t.config.horizon)?;
        t.obs = t.env.reset()?;
        t.episode_return = 0.0;
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub steps: u64,
    pub updates: u64,
    pub final_eval: Option<(f64, f64)>,
    pub metrics: PathBuf,
    pub final_checkpoint: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const STATE_CKPT: &str = "state.ckpt";

fn open_csv(path: &Path, header: &str, append: bool) -> Result<File> {
    if append && path.exists() {
        return Ok(OpenOptions::new().append(true).open(path)?);
    }
    let mut f = File::create(path)?;
    writeln!(f, "{header}")?;
    Ok(f)
}

/// Trains to `config.total_steps`, writing metrics, periodic evaluations and
/// checkpoints under `out`, with one evaluation trajectory per evaluation. With `resume`, continues from `out/state.ckpt`.
pub fn run(config: &TrainConfig, out: &Path, resume: bool) -> Result<RunSummary> {
    fs::create_dir_all(out.join("checkpoints"))?;
    fs::create_dir_all(out.join("trajectories"))?;
    let state_path = out.join(STATE_CKPT);
    let resuming = resume && state_path.exists();
    let mut trainer = if resuming {
        Trainer::resume(config.clone(), &Checkpoint::load(&state_path)?)?
    } else {
        Trainer::new(config.clone())?
    };
    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = std::io::BufWriter::new(open_csv(&metrics_path, METRICS_HEADER, resuming)?);
    let mut evals = open_csv(&out.join(EVAL_FILE), EVAL_HEADER, resuming)?;
    let mut final_eval = None;
    while trainer.step < config.total_steps {
        if let Some(d) = trainer.train_step()? {
            writeln!(metrics, "{}", d.csv_row())?;
        }
        let s = trainer.step;
        if config.eval_every > 0 && s % config.eval_every == 0 {
            let report = trainer.evaluate()?;
            let (m, ci) = (mean(&report.returns), ci90(&report.returns));
            writeln!(evals, "{s},{},{}", fmt_g9(m), fmt_g9(ci))?;
            if let Some(t) = report.trajectories.first() {
                fs::write(out.join("trajectories").join(format!("step_{s:08}.txt")), trajectory_text(t)?)?;
            }
            final_eval = Some((m, ci));
        }
        if config.checkpoint_every > 0 && s % config.checkpoint_every == 0 {
            metrics.flush()?;
            trainer.models().to_checkpoint().save(&out.join("checkpoints").join(format!("step_{s:08}.ckpt")))?;
            trainer.state_checkpoint()?.save(&state_path)?;
        }
    }
    metrics.flush()?;
    let final_checkpoint = out.join(FINAL_CKPT);
    trainer.models().to_checkpoint().save(&final_checkpoint)?;
    trainer.state_checkpoint()?.save(&state_path)?;
    Ok(RunSummary { steps: trainer.step, updates: trainer.learner.updates, final_eval, metrics: metrics_path, final_checkpoint })
}
