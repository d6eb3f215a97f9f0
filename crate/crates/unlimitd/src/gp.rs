//! The single-cluster functional distribution: a Gaussian process over outputs
//! induced by a Gaussian prior on the weights of the linearized network.
//!
//! With feature map `phi(X) = J(theta0, X)^T` and weight prior `N(mu, Sigma)`,
//! a batch of observations is Gaussian with mean `J mu` and covariance
//! `J Sigma J^T + sigma_eps^2 I`. The prior covariance over the weights is
//! either the identity or a low-rank form `Q^T diag(s^2) Q` with orthonormal
//! rows `Q`; low-rank kernels are always evaluated through the projected
//! features `J Q^T`, so no `P x P` matrix is ever materialized.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::diffnet::{jacobian, BatchInputs, ParamVector};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Prior covariance over the weights.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceParam {
    /// `Sigma = I_P`: the full feature map with a fixed unit prior.
    Identity,
    /// `Sigma = Q^T diag(scales^2) Q` with `Q` an `s x P` matrix whose rows are
    /// orthonormal. Positivity of the covariance is automatic because the
    /// scales enter squared.
    LowRank {
        basis: DMatrix<f64>,
        scales: DVector<f64>,
    },
}

impl CovarianceParam {
    /// Builds the low-rank variant, checking shape and row orthonormality.
    pub fn low_rank(basis: DMatrix<f64>, scales: DVector<f64>) -> Result<Self> {
        let s = basis.nrows();
        if s == 0 || s > basis.ncols() {
            return Err(Error::InvalidSpec(format!(
                "projection basis is {}x{}, need 1 <= rows <= cols",
                s,
                basis.ncols()
            )));
        }
        if scales.len() != s {
            return Err(Error::ShapeMismatch(format!(
                "{} scales for a rank-{} basis",
                scales.len(),
                s
            )));
        }
        let gram = &basis * basis.transpose();
        let max_dev = (gram - DMatrix::identity(s, s)).abs().max();
        if max_dev > 1e-8 {
            return Err(Error::InvalidSpec(format!(
                "basis rows are not orthonormal (max |Q Q^T - I| = {max_dev:.2e})"
            )));
        }
        Ok(CovarianceParam::LowRank { basis, scales })
    }

    /// Subspace dimension `s`, or `None` for the identity covariance.
    pub fn subspace_dim(&self) -> Option<usize> {
        match self {
            CovarianceParam::Identity => None,
            CovarianceParam::LowRank { basis, .. } => Some(basis.nrows()),
        }
    }

    /// `J1 Sigma J2^T` without forming `Sigma`.
    pub(crate) fn gram(&self, j1: &DMatrix<f64>, j2: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            CovarianceParam::Identity => j1 * j2.transpose(),
            CovarianceParam::LowRank { basis, scales } => {
                let z1 = scaled_projection(j1, basis, scales);
                let z2 = j2 * basis.transpose();
                z1 * z2.transpose()
            }
        }
    }
}

/// `(J Q^T) diag(scales^2)`, the factored half of a low-rank gram product.
fn scaled_projection(j: &DMatrix<f64>, basis: &DMatrix<f64>, scales: &DVector<f64>) -> DMatrix<f64> {
    let mut z = j * basis.transpose();
    for (c, &s) in scales.iter().enumerate() {
        let mut col = z.column_mut(c);
        col *= s * s;
    }
    z
}

/// One GP over functions: linearization point, weight-space prior and noise.
#[derive(Debug, Clone)]
pub struct GaussianTaskPrior {
    pub lin_point: ParamVector,
    pub weight_mean: DVector<f64>,
    pub cov: CovarianceParam,
    pub noise_std: f64,
}

impl GaussianTaskPrior {
    pub fn new(
        lin_point: ParamVector,
        weight_mean: DVector<f64>,
        cov: CovarianceParam,
        noise_std: f64,
    ) -> Result<Self> {
        let p = lin_point.spec().param_count();
        if weight_mean.len() != p {
            return Err(Error::ShapeMismatch(format!(
                "weight mean has length {}, parameters have length {p}",
                weight_mean.len()
            )));
        }
        if let CovarianceParam::LowRank { basis, .. } = &cov {
            if basis.ncols() != p {
                return Err(Error::ShapeMismatch(format!(
                    "projection basis has {} columns, parameters have length {p}",
                    basis.ncols()
                )));
            }
        }
        if !(noise_std > 0.0) {
            return Err(Error::InvalidSpec(
                "observation noise std must be positive".into(),
            ));
        }
        Ok(Self {
            lin_point,
            weight_mean,
            cov,
            noise_std,
        })
    }

    fn check_outputs(&self, inputs: &BatchInputs, y: &DVector<f64>) -> Result<()> {
        let m = self.lin_point.spec().output_dim() * inputs.len();
        if y.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "observation vector has length {}, expected {m}",
                y.len()
            )));
        }
        Ok(())
    }
}

/// A multivariate Gaussian over vectorized batch outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl PredictiveGaussian {
    fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        // Exact symmetry is part of the contract; gram products only hold it
        // up to rounding.
        let cov = (&cov + cov.transpose()) * 0.5;
        Self { mean, cov }
    }

    /// Per-output standard deviations (square roots of the covariance
    /// diagonal, clamped at zero).
    pub fn std_diag(&self) -> DVector<f64> {
        self.cov.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

/// SPD Cholesky factorization with an escalating diagonal jitter ladder.
///
/// A clean factorization is attempted first; on failure, multiples of the mean
/// diagonal from `1e-10` up to `1e-4` are added. The covariance can be nearly
/// singular when many context points meet a small subspace, so this is a load
/// bearing path, not a corner case.
#[derive(Debug)]
pub(crate) struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    pub fn new(mat: &DMatrix<f64>) -> Result<Self> {
        if let Some(chol) = Cholesky::new(mat.clone()) {
            return Ok(Self { chol });
        }
        let n = mat.nrows();
        let scale = (mat.diagonal().sum() / n as f64).abs().max(f64::MIN_POSITIVE);
        let mut attempted = Vec::new();
        let mut level = 1e-10;
        while level <= 1.5e-4 {
            let jitter = level * scale;
            attempted.push(jitter);
            let mut jittered = mat.clone();
            for i in 0..n {
                jittered[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(jittered) {
                return Ok(Self { chol });
            }
            level *= 10.0;
        }
        Err(Error::Conditioning { attempted })
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `logdet` from the factor diagonal; stable for the near-singular cases
    /// the jitter ladder lets through.
    pub fn logdet(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Kernel matrix `k_Sigma(X1, X2) = J(theta0, X1) Sigma J(theta0, X2)^T`.
/// With the identity covariance this is the NTK gram matrix.
pub fn kernel(
    prior: &GaussianTaskPrior,
    x1: &BatchInputs,
    x2: &BatchInputs,
) -> Result<DMatrix<f64>> {
    let j1 = jacobian(&prior.lin_point, x1)?;
    let j2 = jacobian(&prior.lin_point, x2)?;
    Ok(prior.cov.gram(&j1, &j2))
}

/// Gaussian over the observations at `inputs` implied by the weight prior:
/// mean `J mu`, covariance `k_Sigma(X, X) + sigma_eps^2 I`.
pub fn prior_predictive(prior: &GaussianTaskPrior, inputs: &BatchInputs) -> Result<PredictiveGaussian> {
    let j = jacobian(&prior.lin_point, inputs)?;
    let mean = &j * &prior.weight_mean;
    let mut cov = prior.cov.gram(&j, &j);
    let noise = prior.noise_std * prior.noise_std;
    for i in 0..cov.nrows() {
        cov[(i, i)] += noise;
    }
    Ok(PredictiveGaussian::new(mean, cov))
}

/// Negative log-likelihood of vectorized observations `y` under the prior
/// predictive at `inputs`:
/// `1/2 (||y - m||^2_{C^-1} + logdet C + m ln 2 pi)`.
///
/// This is both the training loss and the out-of-distribution score.
pub fn nll(prior: &GaussianTaskPrior, inputs: &BatchInputs, y: &DVector<f64>) -> Result<f64> {
    prior.check_outputs(inputs, y)?;
    let pred = prior_predictive(prior, inputs)?;
    nll_of_gaussian(&pred, y)
}

/// NLL of `y` under an explicit Gaussian; shared by the mixture code so all
/// likelihood paths factor the covariance identically.
pub(crate) fn nll_of_gaussian(pred: &PredictiveGaussian, y: &DVector<f64>) -> Result<f64> {
    let factor = SpdFactor::new(&pred.cov)?;
    let resid = y - &pred.mean;
    let alpha = factor.solve_vec(&resid);
    let m = y.len() as f64;
    Ok(0.5 * (resid.dot(&alpha) + factor.logdet() + m * LN_2PI))
}

/// Posterior predictive at query inputs after conditioning on context data.
///
/// Observation noise enters on the context block only; query covariance is
/// noise free because predictions are scored against clean query targets.
pub fn posterior_predictive(
    prior: &GaussianTaskPrior,
    xc: &BatchInputs,
    yc: &DVector<f64>,
    xq: &BatchInputs,
) -> Result<PredictiveGaussian> {
    prior.check_outputs(xc, yc)?;
    let jc = jacobian(&prior.lin_point, xc)?;
    let jq = jacobian(&prior.lin_point, xq)?;

    let noise = prior.noise_std * prior.noise_std;
    let mut kcc = prior.cov.gram(&jc, &jc);
    for i in 0..kcc.nrows() {
        kcc[(i, i)] += noise;
    }
    let kqc = prior.cov.gram(&jq, &jc);
    let kqq = prior.cov.gram(&jq, &jq);

    let factor = SpdFactor::new(&kcc)?;
    // Conditioning happens on the residual around the prior mean, so the
    // function-space posterior coincides with pushing the weight-space
    // posterior through the feature map.
    let resid = yc - &jc * &prior.weight_mean;
    let mean = &jq * &prior.weight_mean + &kqc * factor.solve_vec(&resid);
    let cov = &kqq - &kqc * factor.solve_mat(&kqc.transpose());
    Ok(PredictiveGaussian::new(mean, cov))
}
