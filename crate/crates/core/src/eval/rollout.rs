use crate::envs::{make_env, Env, PerturbationConfig, Transition};
use crate::error::{MtcError, Result};
use crate::nn::ModelSet;
use crate::rng::stream;

/// One evaluation episode: the state the agent saw and the action it took
/// at every step.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub env: String,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn act_dim(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutReport {
    pub returns: Vec<f64>,
    pub trajectories: Vec<Trajectory>,
}

fn checked_env(models: &ModelSet, env_id: &str, p: &PerturbationConfig, seed: u64, horizon: usize) -> Result<Box<dyn Env>> {
    let env = make_env(env_id, p, seed, horizon)?;
    let spec = env.spec();
    models.check_dims(spec.obs_dim, spec.act_dim)?;
    Ok(env)
}

/// Runs `episodes` episodes with the deterministic mean action.
pub fn rollout(models: &ModelSet, env_id: &str, p: &PerturbationConfig, episodes: usize, seed: u64, horizon: usize) -> Result<RolloutReport> {
    let mut env = checked_env(models, env_id, p, seed, horizon)?;
    let mut report = RolloutReport::default();
    for _ in 0..episodes {
        let mut obs = env.reset()?;
        let mut traj = Trajectory { env: env_id.to_string(), states: Vec::new(), actions: Vec::new() };
        let mut ret = 0.0;
        loop {
            let a = models.policy.mean_action(&models.store, &obs)?;
            let out = env.step(&a)?;
            traj.states.push(std::mem::replace(&mut obs, out.obs));
            traj.actions.push(a);
            ret += out.reward;
            if out.done || out.truncated {
                break;
            }
        }
        report.returns.push(ret);
        report.trajectories.push(traj);
    }
    Ok(report)
}

/// Collects `steps` transitions with stochastic policy actions.
pub fn collect_on_policy(models: &ModelSet, env_id: &str, p: &PerturbationConfig, steps: usize, seed: u64, horizon: usize) -> Result<Vec<Transition>> {
    let mut env = checked_env(models, env_id, p, seed, horizon)?;
    let mut rng = stream(seed, "on_policy");
    let mut out = Vec::with_capacity(steps);
    let mut obs = env.reset()?;
    while out.len() < steps {
        let (a, _) = models.policy.act(&models.store, &obs, &mut rng)?;
        let a: Vec<f64> = a.into_iter().map(|x| x.clamp(-1.0, 1.0)).collect();
        let step = env.step(&a)?;
        let t = Transition { s: obs, a, r: step.reward, s_next: step.obs.clone(), d: step.done as u8 as f64, truncated: step.truncated };
        let end = t.ends_episode();
        out.push(t);
        obs = if end { env.reset()? } else { step.obs };
    }
    if out.iter().any(|t| !t.r.is_finite()) {
        return Err(MtcError::Numerical("non-finite reward during collection".into()));
    }
    Ok(out)
}
