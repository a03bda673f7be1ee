use crate::autodiff::{Adam, AdamConfig, ParamStore, Tape, Tensor};
use crate::error::{MtcError, Result};
use crate::nn::{Bind, GaussianVars, Mlp};
use crate::rng::stream;
use crate::util::fnv1a;

/// Fixed predictor recipe: two hidden layers of width 64, a diagonal
/// Gaussian head, full-batch Adam.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictorConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self { hidden: 64, steps: 2000, lr: 1e-3, seed: 0 }
    }
}

/// A trajectory is held out when the hash of its contents is divisible by 5,
/// so the split depends on the data alone and not on its order or count.
pub fn is_held_out(actions: &[Vec<f64>]) -> bool {
    let bytes: Vec<u8> = actions.iter().flatten().flat_map(|x| x.to_le_bytes()).collect();
    fnv1a(&bytes) % 5 == 0
}

fn pairs(trajs: &[&Vec<Vec<f64>>], t: usize, dim: usize) -> Result<(Tensor, Tensor)> {
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for traj in trajs {
        for k in 0..traj.len() - t {
            x.extend_from_slice(&traj[k]);
            y.extend_from_slice(&traj[k + t]);
        }
    }
    let n = x.len() / dim;
    Ok((Tensor::matrix(n, dim, x)?, Tensor::matrix(n, dim, y)?))
}

/// Held-out mean negative log-likelihood of `a_{k+t}` given `a_k` under a
/// Gaussian predictor fitted by maximum likelihood on the training split.
pub fn t_step_prediction_error(actions: &[Vec<Vec<f64>>], t: usize, cfg: &PredictorConfig) -> Result<f64> {
    if t == 0 {
        return Err(MtcError::Contract("prediction offset must be positive".into()));
    }
    let Some(dim) = actions.iter().find_map(|a| a.first().map(Vec::len)) else {
        return Err(MtcError::Contract("no actions to fit".into()));
    };
    if let Some(short) = actions.iter().find(|a| a.len() <= t) {
        return Err(MtcError::Contract(format!("offset {t} needs trajectories longer than {t} steps, got {}", short.len())));
    }
    if actions.iter().flatten().any(|a| a.len() != dim) {
        return Err(MtcError::Shape("actions of different dimension".into()));
    }
    let (held, train): (Vec<&Vec<Vec<f64>>>, Vec<&Vec<Vec<f64>>>) = actions.iter().partition(|a| is_held_out(a));
    if held.is_empty() || train.is_empty() {
        return Err(MtcError::Contract(format!(
            "insufficient data: {} training and {} held-out trajectories",
            train.len(),
            held.len()
        )));
    }
    let (x_train, y_train) = pairs(&train, t, dim)?;
    let (x_held, y_held) = pairs(&held, t, dim)?;

    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "predictor", &[dim, cfg.hidden, cfg.hidden, 2 * dim], &mut stream(cfg.seed, "predictor"))?;
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, mlp.params(), &store);
    let nll = |tape: &mut Tape, store: &ParamStore, x: &Tensor, y: &Tensor, mode: Bind| -> Result<_> {
        let xv = tape.input(x.clone());
        let yv = tape.input(y.clone());
        let raw = mlp.forward(tape, store, xv, mode)?;
        let dist = GaussianVars::from_raw(tape, raw)?;
        let lp = dist.log_prob(tape, yv)?;
        let m = tape.mean(lp)?;
        tape.neg(m)
    };
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let loss = nll(&mut tape, &store, &x_train, &y_train, Bind::Train)?;
        if !tape.value(loss).item().is_finite() {
            return Err(MtcError::Numerical("predictor loss diverged".into()));
        }
        tape.backward(loss, &mut store)?;
        opt.apply(&mut store)?;
    }
    let mut tape = Tape::new();
    let loss = nll(&mut tape, &store, &x_held, &y_held, Bind::Frozen)?;
    Ok(tape.value(loss).item())
}
