//! Diagonal Gaussians, in numeric form and as tape values.
//!
//! Every density is evaluated in log space.

use std::f64::consts::LN_2;

use rand::Rng;

use crate::autodiff::{softplus, Tape, Tensor, Var};
use crate::error::{shape_err, Result};
use crate::rng::standard_normal;

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// `ln(2π) / 2`
pub const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_7;

/// Largest magnitude an action may take before `atanh`; keeps replayed
/// boundary actions at a finite pre-squash value.
pub const ACTION_LIMIT: f64 = 1.0 - 1e-6;

/// Diagonal Gaussian with explicit parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

impl DiagGaussian {
    /// `log_std` is clamped into `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() || mean.is_empty() {
            return shape_err(format!("mean has {} dims, log_std {}", mean.len(), log_std.len()));
        }
        let log_std = log_std.into_iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        Ok(Self { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], log_std: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim(), "dimension mismatch");
        x.iter()
            .zip(&self.mean)
            .zip(&self.log_std)
            .map(|((x, m), l)| {
                let z = (x - m) * (-l).exp();
                -0.5 * z * z - l - HALF_LN_TWO_PI
            })
            .sum()
    }

    /// `mean + std · eps`.
    pub fn reparameterize(&self, eps: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .zip(eps)
            .map(|((m, l), e)| m + l.exp() * e)
            .collect()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let eps: Vec<f64> = (0..self.dim()).map(|_| standard_normal(rng)).collect();
        self.reparameterize(&eps)
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|l| l + 0.5 + HALF_LN_TWO_PI).sum()
    }
}

/// Analytic `KL(p ‖ q)` between diagonal Gaussians.
pub fn kl_diag_gaussian(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return shape_err(format!("KL between {}-dim and {}-dim Gaussians", p.dim(), q.dim()));
    }
    let kl = (0..p.dim())
        .map(|i| {
            let var_p = (2.0 * p.log_std[i]).exp();
            let var_q = (2.0 * q.log_std[i]).exp();
            let d = p.mean[i] - q.mean[i];
            0.5 * ((var_p + d * d) / var_q - 1.0) + q.log_std[i] - p.log_std[i]
        })
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// `Σ log(1 - tanh(u)²)` in the overflow-safe form `2(ln 2 - u - softplus(-2u))`.
pub fn tanh_log_det(u: &[f64]) -> f64 {
    u.iter().map(|&x| 2.0 * (LN_2 - x - softplus(-2.0 * x))).sum()
}

/// Log-density of `a = tanh(u)` when `u` follows `base`.
pub fn squashed_log_prob(base: &DiagGaussian, u: &[f64]) -> f64 {
    base.log_prob(u) - tanh_log_det(u)
}

/// `atanh` after clamping into the open action box.
pub fn atanh_clamped(a: f64) -> f64 {
    a.clamp(-ACTION_LIMIT, ACTION_LIMIT).atanh()
}

/// Maps an unconstrained network output into `[LOG_STD_MIN, LOG_STD_MAX]`
/// via a rescaled tanh.
pub fn bounded_log_std(tape: &mut Tape, raw: Var) -> Result<Var> {
    let t = tape.tanh(raw)?;
    let t = tape.shift(t, 1.0)?;
    let t = tape.scale(t, 0.5 * (LOG_STD_MAX - LOG_STD_MIN))?;
    tape.shift(t, LOG_STD_MIN)
}

/// A batch of diagonal Gaussians living on a tape, one per row.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_std: Var,
}

impl GaussianVars {
    /// Splits `raw` (`B × 2d`) into mean and bounded log-std.
    pub fn from_raw(tape: &mut Tape, raw: Var) -> Result<Self> {
        let (_, cols) = tape.shape(raw);
        if cols % 2 != 0 {
            return shape_err(format!("gaussian head needs an even width, got {cols}"));
        }
        let d = cols / 2;
        let mean = tape.slice_cols(raw, 0, d)?;
        let raw_log_std = tape.slice_cols(raw, d, cols)?;
        let log_std = bounded_log_std(tape, raw_log_std)?;
        Ok(Self { mean, log_std })
    }

    pub fn dim(&self, tape: &Tape) -> usize {
        tape.shape(self.mean).1
    }

    /// Per-row log-density, `B × 1`.
    pub fn log_prob(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.shape(x) != tape.shape(self.mean) {
            return shape_err(format!("log_prob of {:?} under {:?}", tape.shape(x), tape.shape(self.mean)));
        }
        let d = self.dim(tape) as f64;
        let diff = tape.sub(x, self.mean)?;
        let neg_log_std = tape.neg(self.log_std)?;
        let inv_std = tape.exp(neg_log_std)?;
        let z = tape.mul(diff, inv_std)?;
        let z2 = tape.square(z)?;
        let quad = tape.scale(z2, -0.5)?;
        let per_dim = tape.sub(quad, self.log_std)?;
        let summed = tape.sum_cols(per_dim)?;
        tape.shift(summed, -d * HALF_LN_TWO_PI)
    }

    /// Reparameterized draw `mean + exp(log_std) · eps`.
    pub fn rsample(&self, tape: &mut Tape, eps: Tensor) -> Result<Var> {
        if (eps.rows(), eps.cols()) != tape.shape(self.mean) {
            return shape_err("noise shape differs from the distribution batch");
        }
        let e = tape.input(eps);
        let std = tape.exp(self.log_std)?;
        let scaled = tape.mul(std, e)?;
        tape.add(self.mean, scaled)
    }

    pub fn row(&self, tape: &Tape, r: usize) -> DiagGaussian {
        DiagGaussian {
            mean: tape.value(self.mean).row(r).to_vec(),
            log_std: tape.value(self.log_std).row(r).to_vec(),
        }
    }
}

/// `Σ_cols log(1 - tanh(u)²)` on a tape, `B × 1`.
pub fn tanh_log_det_var(tape: &mut Tape, u: Var) -> Result<Var> {
    let m2u = tape.scale(u, -2.0)?;
    let sp = tape.softplus(m2u)?;
    let s = tape.add(u, sp)?;
    let s = tape.scale(s, -2.0)?;
    let s = tape.shift(s, 2.0 * LN_2)?;
    tape.sum_cols(s)
}

/// Log-density of `tanh(u)` for a tape value `u` drawn from `base`.
pub fn squashed_log_prob_var(tape: &mut Tape, base: &GaussianVars, u: Var) -> Result<Var> {
    let lp = base.log_prob(tape, u)?;
    let det = tanh_log_det_var(tape, u)?;
    tape.sub(lp, det)
}

/// Pre-squash values for a batch of (constant) actions.
pub fn atanh_tensor(actions: &Tensor) -> Tensor {
    let data = actions.data().iter().map(|&a| atanh_clamped(a)).collect();
    Tensor::matrix(actions.rows(), actions.cols(), data).expect("finite after clamping")
}
