use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{MtcError, Result};
use crate::nn::DiagGaussian;
use crate::rng::standard_normal;

/// Total correlation of a zero-mean Gaussian vector with covariance `cov`,
/// `½(Σ ln Σ_ii − ln det Σ)`, via a Cholesky factor.
pub fn gaussian_tc_analytic(cov: &DMatrix<f64>) -> Result<f64> {
    let n = cov.nrows();
    if n == 0 || cov.ncols() != n {
        return Err(MtcError::Shape(format!("covariance must be square, got {}x{}", n, cov.ncols())));
    }
    if (0..n).any(|i| (0..i).any(|j| (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * (1.0 + cov[(i, j)].abs()))) {
        return Err(MtcError::Domain("covariance is not symmetric".into()));
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| MtcError::Domain("covariance is not positive definite".into()))?;
    let l = chol.l();
    let log_det = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
    let log_marg = (0..n).map(|i| cov[(i, i)].ln()).sum::<f64>();
    Ok(0.5 * (log_marg - log_det))
}

/// Stationary unit-variance AR(1) covariance `Σ_ij = ρ^|i−j|`.
pub fn ar1_covariance(n: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

/// `Σ_t γ^t (c_z[t] + c_a[t])`.
pub fn discounted_tc_estimate(c_z: &[f64], c_a: &[f64], gamma: f64) -> Result<f64> {
    if c_z.len() != c_a.len() {
        return Err(MtcError::Shape("state and action terms differ in length".into()));
    }
    let mut w = 1.0;
    let mut total = 0.0;
    for (z, a) in c_z.iter().zip(c_a) {
        total += w * (z + a);
        w *= gamma;
    }
    Ok(total)
}

/// Variational conditional `q(z_{t+1} | z_t) = N(gain·z_t + bias, exp(log_std)²)`
/// used in place of the exact AR(1) conditional.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearGaussianModel {
    pub gain: f64,
    pub bias: f64,
    pub log_std: f64,
}

impl LinearGaussianModel {
    pub fn exact(rho: f64) -> Self {
        Self { gain: rho, bias: 0.0, log_std: 0.5 * (1.0 - rho * rho).ln() }
    }

    /// Exact model with each coefficient shifted by up to `scale`.
    pub fn perturbed(rho: f64, scale: f64, rng: &mut impl Rng) -> Self {
        let e = Self::exact(rho);
        Self {
            gain: e.gain + scale * rng.random_range(-1.0..1.0),
            bias: e.bias + scale * rng.random_range(-1.0..1.0),
            log_std: e.log_std + scale * rng.random_range(-1.0..1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

/// Monte-Carlo lower bound on the TC of an `n`-step stationary AR(1) chain:
/// per chain `Σ_t [log q(z_{t+1} | z_t) − log f(z_{t+1})]` with the true
/// unit-normal marginal as `f`.
pub fn ar1_bound_estimate(rho: f64, n: usize, samples: usize, model: LinearGaussianModel, rng: &mut impl Rng) -> Result<BoundEstimate> {
    if !(rho.abs() < 1.0) || n < 2 || samples < 2 {
        return Err(MtcError::Domain(format!("need |rho| < 1, n >= 2 and >= 2 samples (rho={rho}, n={n}, samples={samples})")));
    }
    let marginal = DiagGaussian::standard(1);
    let innov = (1.0 - rho * rho).sqrt();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let mut z = standard_normal(rng);
        let mut chain = 0.0;
        for _ in 1..n {
            let next = rho * z + innov * standard_normal(rng);
            let q = DiagGaussian::new(vec![model.gain * z + model.bias], vec![model.log_std])?;
            chain += q.log_prob(&[next]) - marginal.log_prob(&[next]);
            z = next;
        }
        sum += chain;
        sum_sq += chain * chain;
    }
    let k = samples as f64;
    let mean = sum / k;
    let var = (sum_sq / k - mean * mean).max(0.0) * k / (k - 1.0);
    Ok(BoundEstimate { mean, std_err: (var / k).sqrt(), samples })
}
