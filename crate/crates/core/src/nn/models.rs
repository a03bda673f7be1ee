use crate::autodiff::{Checkpoint, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{contract_err, MtcError, Result};
use crate::rng::{self, normal_vec};

use super::gaussian::{atanh_tensor, squashed_log_prob_var, DiagGaussian, GaussianVars};
use super::layers::{Bind, LayerNorm, Linear, LstmCell, Mlp};

/// Treatment of the recurrent output before the prediction head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputNorm {
    LayerNorm,
    None,
}

impl OutputNorm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "layer_norm" => Ok(Self::LayerNorm),
            "none" => Ok(Self::None),
            other => Err(MtcError::Config(format!("dynamics_output_norm must be layer_norm or none, got {other}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::LayerNorm => "layer_norm",
            Self::None => "none",
        }
    }
}

/// Which representation models a run owns besides policy and critics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Representation {
    /// Plain SAC: no encoder, no predictors.
    None,
    /// Encoder plus history dynamics, optionally with the action predictor.
    History { action_model: bool },
    /// Encoder plus a one-step latent dynamics model.
    OneStep,
}

impl Representation {
    fn code(self) -> f64 {
        match self {
            Self::None => 0.0,
            Self::History { action_model: true } => 1.0,
            Self::History { action_model: false } => 2.0,
            Self::OneStep => 3.0,
        }
    }

    fn from_code(c: f64) -> Result<Self> {
        match c as i64 {
            0 => Ok(Self::None),
            1 => Ok(Self::History { action_model: true }),
            2 => Ok(Self::History { action_model: false }),
            3 => Ok(Self::OneStep),
            _ => Err(MtcError::Checkpoint(format!("unknown representation code {c}"))),
        }
    }
}

/// Architecture manifest; stored inside every checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub rnn_hidden: usize,
    pub rnn_out: usize,
    pub output_norm: OutputNorm,
    pub representation: Representation,
}

impl Architecture {
    const VERSION: f64 = 1.0;
    pub const ENTRY: &'static str = "__arch__";

    /// Reference widths: latent 30, perceptrons 256-256, recurrent hidden 256
    /// projected to 30, layer-normalized recurrent output.
    pub fn reference(obs_dim: usize, act_dim: usize, representation: Representation) -> Self {
        Self {
            obs_dim,
            act_dim,
            latent_dim: 30,
            hidden: 256,
            rnn_hidden: 256,
            rnn_out: 30,
            output_norm: OutputNorm::LayerNorm,
            representation,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let v = vec![
            Self::VERSION,
            self.obs_dim as f64,
            self.act_dim as f64,
            self.latent_dim as f64,
            self.hidden as f64,
            self.rnn_hidden as f64,
            self.rnn_out as f64,
            if self.output_norm == OutputNorm::LayerNorm { 1.0 } else { 0.0 },
            self.representation.code(),
        ];
        Tensor::new(vec![v.len()], v).expect("finite manifest")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 9 || d[0] != Self::VERSION {
            return Err(MtcError::Checkpoint("unsupported architecture manifest".into()));
        }
        let u = |x: f64| x as usize;
        Ok(Self {
            obs_dim: u(d[1]),
            act_dim: u(d[2]),
            latent_dim: u(d[3]),
            hidden: u(d[4]),
            rnn_hidden: u(d[5]),
            rnn_out: u(d[6]),
            output_norm: if d[7] == 1.0 { OutputNorm::LayerNorm } else { OutputNorm::None },
            representation: Representation::from_code(d[8])?,
        })
    }
}

/// Stochastic encoder `f(z | s)`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub mlp: Mlp,
    pub latent_dim: usize,
}

impl Encoder {
    pub fn distribution(&self, tape: &mut Tape, store: &ParamStore, obs: Var, mode: Bind) -> Result<GaussianVars> {
        let raw = self.mlp.forward(tape, store, obs, mode)?;
        GaussianVars::from_raw(tape, raw)
    }

    /// Reparameterized latent sample and its distribution.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, obs: Var, eps: Tensor, mode: Bind) -> Result<(Var, GaussianVars)> {
        let dist = self.distribution(tape, store, obs, mode)?;
        let z = dist.rsample(tape, eps)?;
        Ok((z, dist))
    }
}

/// Tanh-squashed Gaussian policy `π(a | s)`.
#[derive(Clone, Debug)]
pub struct Policy {
    pub mlp: Mlp,
    pub act_dim: usize,
}

impl Policy {
    /// Pre-squash Gaussian over `u`, with `a = tanh(u)`.
    pub fn distribution(&self, tape: &mut Tape, store: &ParamStore, obs: Var, mode: Bind) -> Result<GaussianVars> {
        let raw = self.mlp.forward(tape, store, obs, mode)?;
        GaussianVars::from_raw(tape, raw)
    }

    /// Reparameterized action and its log-density (tanh correction included).
    pub fn sample(&self, tape: &mut Tape, store: &ParamStore, obs: Var, eps: Tensor, mode: Bind) -> Result<(Var, Var)> {
        let dist = self.distribution(tape, store, obs, mode)?;
        let u = dist.rsample(tape, eps)?;
        let a = tape.tanh(u)?;
        let lp = squashed_log_prob_var(tape, &dist, u)?;
        Ok((a, lp))
    }

    /// Log-density of given (replayed) actions.
    pub fn log_prob_of(&self, tape: &mut Tape, store: &ParamStore, obs: Var, actions: &Tensor, mode: Bind) -> Result<Var> {
        let dist = self.distribution(tape, store, obs, mode)?;
        let u = tape.input(atanh_tensor(actions));
        squashed_log_prob_var(tape, &dist, u)
    }

    /// Samples one action for a single observation.
    pub fn act(&self, store: &ParamStore, obs: &[f64], rng: &mut rng::StreamRng) -> Result<(Vec<f64>, f64)> {
        let mut tape = Tape::new();
        let o = tape.input(Tensor::matrix(1, obs.len(), obs.to_vec())?);
        let eps = Tensor::matrix(1, self.act_dim, normal_vec(rng, self.act_dim))?;
        let (a, lp) = self.sample(&mut tape, store, o, eps, Bind::Frozen)?;
        Ok((tape.value(a).data().to_vec(), tape.value(lp).item()))
    }

    /// Deterministic evaluation action `tanh(mean)`.
    pub fn mean_action(&self, store: &ParamStore, obs: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let o = tape.input(Tensor::matrix(1, obs.len(), obs.to_vec())?);
        let dist = self.distribution(&mut tape, store, o, Bind::Frozen)?;
        Ok(tape.value(dist.mean).data().iter().map(|u| u.tanh()).collect())
    }

    /// Pre-squash distribution for one observation.
    pub fn base_distribution(&self, store: &ParamStore, obs: &[f64]) -> Result<DiagGaussian> {
        let mut tape = Tape::new();
        let o = tape.input(Tensor::matrix(1, obs.len(), obs.to_vec())?);
        let dist = self.distribution(&mut tape, store, o, Bind::Frozen)?;
        Ok(dist.row(&tape, 0))
    }
}

/// Recurrent core, projection, optional normalization and Gaussian head.
/// Used both for `q(z_{t+1} | z_{1:t}, a_{1:t})` and `q(a_t | z_{1:t}, a_{1:t-1})`.
#[derive(Clone, Debug)]
pub struct HistoryModel {
    pub cell: LstmCell,
    pub proj: Linear,
    pub norm: Option<LayerNorm>,
    pub head: Mlp,
    pub out_dim: usize,
}

impl HistoryModel {
    fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, arch: &Architecture, rng: &mut rng::StreamRng) -> Result<Self> {
        let cell = LstmCell::new(store, &format!("{name}.cell"), in_dim, arch.rnn_hidden, rng)?;
        let proj = Linear::new(store, &format!("{name}.proj"), arch.rnn_hidden, arch.rnn_out, rng)?;
        let norm = match arch.output_norm {
            OutputNorm::LayerNorm => Some(LayerNorm::new(store, &format!("{name}.norm"), arch.rnn_out)?),
            OutputNorm::None => None,
        };
        let head = Mlp::new(store, &format!("{name}.head"), &[arch.rnn_out, arch.hidden, arch.hidden, 2 * out_dim], rng)?;
        Ok(Self { cell, proj, norm, head, out_dim })
    }

    /// Unrolls over `inputs` (each `B × in`) and returns the predictive
    /// distributions emitted after each step listed in `emit`, stacked
    /// time-major (`emit.len() · B` rows).
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, inputs: &[Var], emit: &[usize], mode: Bind) -> Result<GaussianVars> {
        if inputs.is_empty() {
            return contract_err("history model needs at least one step");
        }
        if emit.is_empty() || emit.iter().any(|&e| e >= inputs.len()) || emit.windows(2).any(|w| w[0] >= w[1]) {
            return contract_err(format!("emit steps {emit:?} invalid for {} inputs", inputs.len()));
        }
        let batch = tape.shape(inputs[0]).0;
        let mut state = self.cell.zero_state(tape, batch);
        let mut outputs = Vec::with_capacity(emit.len());
        let last = *emit.last().expect("non-empty");
        for (k, &x) in inputs.iter().enumerate().take(last + 1) {
            let (h, next) = self.cell.step(tape, store, x, state, mode)?;
            state = next;
            if emit.contains(&k) {
                outputs.push(h);
            }
        }
        let stacked = if outputs.len() == 1 { outputs[0] } else { tape.concat_rows(&outputs)? };
        let mut y = self.proj.forward(tape, store, stacked, mode)?;
        if let Some(norm) = &self.norm {
            y = norm.forward(tape, store, y, mode)?;
        }
        let raw = self.head.forward(tape, store, y, mode)?;
        GaussianVars::from_raw(tape, raw)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.cell.params();
        p.extend(self.proj.params());
        if let Some(n) = &self.norm {
            p.extend(n.params());
        }
        p.extend(self.head.params());
        p
    }
}

/// One-step latent dynamics `q(z_{t+1} | z_t, a_t)`.
#[derive(Clone, Debug)]
pub struct OneStepDynamics {
    pub mlp: Mlp,
}

impl OneStepDynamics {
    pub fn predict(&self, tape: &mut Tape, store: &ParamStore, z: Var, a: Var, mode: Bind) -> Result<GaussianVars> {
        let x = tape.concat_cols(&[z, a])?;
        let raw = self.mlp.forward(tape, store, x, mode)?;
        GaussianVars::from_raw(tape, raw)
    }
}

/// Soft-Q network `Q(s, a)`.
#[derive(Clone, Debug)]
pub struct QNet {
    pub mlp: Mlp,
}

impl QNet {
    pub fn q(&self, tape: &mut Tape, store: &ParamStore, obs: Var, act: Var, mode: Bind) -> Result<Var> {
        let x = tape.concat_cols(&[obs, act])?;
        self.mlp.forward(tape, store, x, mode)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }
}

/// Every learnable quantity of one run.
#[derive(Clone, Debug)]
pub struct ModelSet {
    pub arch: Architecture,
    pub store: ParamStore,
    pub encoder: Option<Encoder>,
    pub policy: Policy,
    pub dynamics: Option<HistoryModel>,
    pub action_model: Option<HistoryModel>,
    pub one_step: Option<OneStepDynamics>,
    pub q1: QNet,
    pub q2: QNet,
    pub q1_target: QNet,
    pub q2_target: QNet,
    pub log_alpha: ParamId,
    /// `log β'` with `β' = β + α`.
    pub log_beta: ParamId,
}

impl ModelSet {
    /// Fresh models; each sub-model initializes from its own seed stream so
    /// the presence of optional models never changes the others.
    pub fn new(arch: Architecture, seed: u64, init_alpha: f64, init_temperature: f64) -> Result<Self> {
        if init_alpha <= 0.0 || init_temperature <= 0.0 {
            return Err(MtcError::Config("initial alpha and temperature must be positive".into()));
        }
        let a = arch;
        let mut store = ParamStore::new();
        let init = |name: &str| rng::stream(seed, &format!("init.{name}"));

        let policy = Policy {
            mlp: Mlp::new(&mut store, "policy", &[a.obs_dim, a.hidden, a.hidden, 2 * a.act_dim], &mut init("policy"))?,
            act_dim: a.act_dim,
        };
        let q_dims = [a.obs_dim + a.act_dim, a.hidden, a.hidden, 1];
        let q1 = QNet { mlp: Mlp::new(&mut store, "q1", &q_dims, &mut init("q1"))? };
        let q2 = QNet { mlp: Mlp::new(&mut store, "q2", &q_dims, &mut init("q2"))? };
        let q1_target = QNet { mlp: Mlp::new(&mut store, "q1_target", &q_dims, &mut init("q1"))? };
        let q2_target = QNet { mlp: Mlp::new(&mut store, "q2_target", &q_dims, &mut init("q2"))? };
        let log_alpha = store.insert("log_alpha", Tensor::scalar(init_alpha.ln()))?;
        let log_beta = store.insert("log_beta_prime", Tensor::scalar(init_temperature.ln()))?;

        let (mut encoder, mut dynamics, mut action_model, mut one_step) = (None, None, None, None);
        if a.representation != Representation::None {
            encoder = Some(Encoder {
                mlp: Mlp::new(&mut store, "encoder", &[a.obs_dim, a.hidden, a.hidden, 2 * a.latent_dim], &mut init("encoder"))?,
                latent_dim: a.latent_dim,
            });
        }
        match a.representation {
            Representation::None => {}
            Representation::History { action_model: with_actions } => {
                dynamics = Some(HistoryModel::new(&mut store, "dynamics", a.latent_dim + a.act_dim, a.latent_dim, &a, &mut init("dynamics"))?);
                if with_actions {
                    action_model = Some(HistoryModel::new(&mut store, "action_model", a.latent_dim + a.act_dim, a.act_dim, &a, &mut init("action_model"))?);
                }
            }
            Representation::OneStep => {
                one_step = Some(OneStepDynamics {
                    mlp: Mlp::new(&mut store, "one_step", &[a.latent_dim + a.act_dim, a.hidden, a.hidden, 2 * a.latent_dim], &mut init("one_step"))?,
                });
            }
        }
        let models = Self { arch, store, encoder, policy, dynamics, action_model, one_step, q1, q2, q1_target, q2_target, log_alpha, log_beta };
        // targets start as exact copies
        let mut models = models;
        let (src, dst) = models.target_pairs();
        soft_update(&mut models.store, &src, &dst, 1.0)?;
        Ok(models)
    }

    pub fn alpha(&self) -> f64 {
        self.store.get(self.log_alpha).item().exp()
    }

    pub fn beta_prime(&self) -> f64 {
        self.store.get(self.log_beta).item().exp()
    }

    pub fn critic_params(&self) -> Vec<ParamId> {
        let mut p = self.q1.params();
        p.extend(self.q2.params());
        p
    }

    pub fn policy_params(&self) -> Vec<ParamId> {
        self.policy.mlp.params()
    }

    /// Encoder and prediction models.
    pub fn representation_params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        if let Some(e) = &self.encoder {
            p.extend(e.mlp.params());
        }
        if let Some(d) = &self.dynamics {
            p.extend(d.params());
        }
        if let Some(m) = &self.action_model {
            p.extend(m.params());
        }
        if let Some(o) = &self.one_step {
            p.extend(o.mlp.params());
        }
        p
    }

    pub fn target_pairs(&self) -> (Vec<ParamId>, Vec<ParamId>) {
        let mut src = self.q1.params();
        src.extend(self.q2.params());
        let mut dst = self.q1_target.params();
        dst.extend(self.q2_target.params());
        (src, dst)
    }

    /// Polyak update of both target critics.
    pub fn update_targets(&mut self, tau: f64) -> Result<()> {
        let (src, dst) = self.target_pairs();
        soft_update(&mut self.store, &src, &dst, tau)
    }

    /// Distribution of `z_{t+1}` given `z_{1:t}` and `a_{1:t}` (each entry `B × ·`).
    pub fn predict_next_latent(&self, tape: &mut Tape, z: &[Var], a: &[Var], mode: Bind) -> Result<GaussianVars> {
        let model = self.dynamics.as_ref().ok_or_else(|| MtcError::Contract("run has no history dynamics model".into()))?;
        if z.is_empty() || z.len() != a.len() {
            return contract_err(format!("need t >= 1 latents and t actions, got {} and {}", z.len(), a.len()));
        }
        let inputs = z.iter().zip(a).map(|(&zk, &ak)| tape.concat_cols(&[zk, ak])).collect::<Result<Vec<_>>>()?;
        model.run(tape, &self.store, &inputs, &[inputs.len() - 1], mode)
    }

    /// Pre-squash distribution of `a_t` given `z_{1:t}` and `a_{1:t-1}`.
    pub fn predict_action(&self, tape: &mut Tape, z: &[Var], a_prev: &[Var], mode: Bind) -> Result<GaussianVars> {
        let model = self.action_model.as_ref().ok_or_else(|| MtcError::Contract("run has no action prediction model".into()))?;
        if z.is_empty() || a_prev.len() + 1 != z.len() {
            return contract_err(format!("need t >= 1 latents and t-1 actions, got {} and {}", z.len(), a_prev.len()));
        }
        let inputs = action_model_inputs(tape, z, a_prev, self.arch.act_dim)?;
        model.run(tape, &self.store, &inputs, &[inputs.len() - 1], mode)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push(Architecture::ENTRY, self.arch.to_tensor());
        for (_, name, t) in self.store.iter() {
            c.push(name, Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("finite parameters"));
        }
        c
    }

    /// Rebuilds models from a checkpoint, validating every parameter shape
    /// against the embedded architecture.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let arch_t = ckpt
            .get(Architecture::ENTRY)
            .ok_or_else(|| MtcError::Checkpoint("missing architecture manifest".into()))?;
        let arch = Architecture::from_tensor(arch_t)?;
        let mut models = Self::new(arch, 0, 1.0, 1.0)?;
        let ids: Vec<ParamId> = models.store.ids().collect();
        for id in ids {
            let name = models.store.name(id).to_string();
            let shape = models.store.get(id).shape().to_vec();
            let src = ckpt.expect(&name, &shape)?;
            models.store.get_mut(id).data_mut().copy_from_slice(src.data());
        }
        Ok(models)
    }

    /// Rejects checkpoints built for other observation/action sizes.
    pub fn check_dims(&self, obs_dim: usize, act_dim: usize) -> Result<()> {
        if self.arch.obs_dim != obs_dim || self.arch.act_dim != act_dim {
            return Err(MtcError::Checkpoint(format!(
                "checkpoint expects obs {} / act {}, environment has {obs_dim} / {act_dim}",
                self.arch.obs_dim, self.arch.act_dim
            )));
        }
        Ok(())
    }
}

/// Inputs `(z_k, a_{k-1})` with `a_0 = 0`.
pub(crate) fn action_model_inputs(tape: &mut Tape, z: &[Var], a_prev: &[Var], act_dim: usize) -> Result<Vec<Var>> {
    let batch = tape.shape(z[0]).0;
    let zero = tape.input(Tensor::zeros(batch, act_dim));
    z.iter()
        .enumerate()
        .map(|(k, &zk)| {
            let prev = if k == 0 { zero } else { a_prev[k - 1] };
            tape.concat_cols(&[zk, prev])
        })
        .collect()
}

/// `target ← (1 − τ)·target + τ·source`, parameter by parameter.
pub fn soft_update(store: &mut ParamStore, source: &[ParamId], target: &[ParamId], tau: f64) -> Result<()> {
    if source.len() != target.len() {
        return contract_err("soft update between parameter lists of different length");
    }
    if !(0.0..=1.0).contains(&tau) {
        return contract_err(format!("soft update rate {tau} outside [0, 1]"));
    }
    for (&s, &t) in source.iter().zip(target) {
        if !store.get(s).same_shape(store.get(t)) {
            return contract_err(format!("soft update {} -> {}: shape mismatch", store.name(s), store.name(t)));
        }
        let src = store.get(s).data().to_vec();
        let dst = store.get_mut(t).data_mut();
        if tau == 1.0 {
            dst.copy_from_slice(&src);
        } else if tau != 0.0 {
            dst.iter_mut().zip(&src).for_each(|(d, s)| *d = (1.0 - tau) * *d + tau * s);
        }
    }
    Ok(())
}
