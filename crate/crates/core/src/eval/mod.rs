//! Measurement protocols: rollouts, trajectory compressibility, action
//! predictability, robustness sweeps and the Gaussian total-correlation
//! oracle.

mod compress;
mod predict;
mod report;
mod rollout;
mod tc;

pub use compress::{binary_dump, compress_trajectory, fmt_one_decimal, normalized_size, trajectory_text, Compressor};
pub use predict::{is_held_out, t_step_prediction_error, PredictorConfig};
pub use report::{
    ci90, mean, normalize, parse_report_csv, report_csv, return_floor, robustness_sweep, PerturbKind, ReportRow,
    SweepSpec, REPORT_HEADER, Z90,
};
pub use rollout::{collect_on_policy, rollout, RolloutReport, Trajectory};
pub use tc::{ar1_bound_estimate, ar1_covariance, discounted_tc_estimate, gaussian_tc_analytic, BoundEstimate, LinearGaussianModel};

use rand::Rng;

use crate::envs::{PerturbationConfig, Transition};
use crate::error::{MtcError, Result};
use crate::nn::ModelSet;
use crate::objective::{rpc_bound_terms, tc_bound_terms};
use crate::replay::ReplayBuffer;

/// Mixed bound of on-policy data: per-window means of the mixed per-step
/// terms over consecutive non-overlapping windows, with their standard error.
pub fn on_policy_bound(models: &ModelSet, data: &[Transition], history: usize, m: f64, batch: usize, rng: &mut impl Rng) -> Result<BoundEstimate> {
    let (obs_dim, act_dim) = (models.arch.obs_dim, models.arch.act_dim);
    let mut buf = ReplayBuffer::new(data.len().max(1), obs_dim, act_dim)?;
    for t in data {
        buf.push(t)?;
    }
    let mut starts = Vec::new();
    let mut i = buf.oldest();
    while i + history as u64 <= buf.pushed() {
        if buf.is_valid_start(i, history) {
            starts.push(i);
            i += history as u64;
        } else {
            i += 1;
        }
    }
    if starts.len() < 2 {
        return Err(MtcError::Contract("need at least two on-policy windows".into()));
    }
    let mut window_means = Vec::with_capacity(starts.len());
    for chunk in starts.chunks(batch.max(1)) {
        let windows = chunk.iter().map(|&s| buf.window(s, history)).collect::<Result<Vec<_>>>()?;
        let wb = crate::window::WindowBatch::from_windows(&windows)?;
        let terms = if models.dynamics.is_some() { tc_bound_terms(&wb, models, rng)? } else { rpc_bound_terms(&wb, models, rng)? };
        let mixed = terms.mixed_terms(m)?;
        let b = wb.batch;
        for w in 0..b {
            window_means.push((0..history).map(|t| mixed[t * b + w]).sum::<f64>() / history as f64);
        }
    }
    let n = window_means.len() as f64;
    let mu = mean(&window_means);
    let var = window_means.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(BoundEstimate { mean: mu, std_err: (var / n).sqrt(), samples: window_means.len() })
}

/// Convenience wrapper: collect `steps` on-policy steps, then bound them.
pub fn on_policy_bound_from_env(models: &ModelSet, env_id: &str, p: &PerturbationConfig, steps: usize, history: usize, m: f64, seed: u64, horizon: usize) -> Result<BoundEstimate> {
    let data = collect_on_policy(models, env_id, p, steps, seed, horizon)?;
    let mut rng = crate::rng::stream(seed, "on_policy.encoder");
    on_policy_bound(models, &data, history, m, 64, &mut rng)
}
