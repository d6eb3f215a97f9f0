//! Equal-weighted mixture of GPs sharing one linearization point and one
//! projection basis, with per-cluster weight means and scales.
//!
//! Likelihoods combine through a log-sum-exp, cluster identification picks the
//! most likely component, and prediction conditions the identified component
//! only (the exact posterior of a mixture is itself a mixture; hard selection
//! is what this model does).

use nalgebra::{DMatrix, DVector};

use crate::diffnet::{BatchInputs, ParamVector};
use crate::error::{Error, Result};
use crate::gp::{self, CovarianceParam, GaussianTaskPrior, PredictiveGaussian};

/// Per-cluster parameters: weight-space mean and subspace scales.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPrior {
    pub weight_mean: DVector<f64>,
    pub scales: DVector<f64>,
}

/// The multimodal task distribution.
#[derive(Debug, Clone)]
pub struct MixtureModel {
    lin_point: ParamVector,
    basis: DMatrix<f64>,
    clusters: Vec<ClusterPrior>,
    noise_std: f64,
}

impl MixtureModel {
    pub fn new(
        lin_point: ParamVector,
        basis: DMatrix<f64>,
        clusters: Vec<ClusterPrior>,
        noise_std: f64,
    ) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::InvalidSpec("a mixture needs at least one cluster".into()));
        }
        let p = lin_point.spec().param_count();
        let s = basis.nrows();
        for (j, c) in clusters.iter().enumerate() {
            if c.weight_mean.len() != p {
                return Err(Error::ShapeMismatch(format!(
                    "cluster {j}: weight mean has length {}, parameters have length {p}",
                    c.weight_mean.len()
                )));
            }
            if c.scales.len() != s {
                return Err(Error::ShapeMismatch(format!(
                    "cluster {j}: {} scales for a rank-{s} basis",
                    c.scales.len()
                )));
            }
        }
        // Reuse the orthonormality check; the scales of cluster 0 stand in for
        // shape validation of the shared basis.
        CovarianceParam::low_rank(basis.clone(), clusters[0].scales.clone())?;
        if !(noise_std > 0.0) {
            return Err(Error::InvalidSpec(
                "observation noise std must be positive".into(),
            ));
        }
        Ok(Self {
            lin_point,
            basis,
            clusters,
            noise_std,
        })
    }

    pub fn cluster_count(&self) -> usize {
        self.clusters.len()
    }

    pub fn lin_point(&self) -> &ParamVector {
        &self.lin_point
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn clusters(&self) -> &[ClusterPrior] {
        &self.clusters
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    /// The GP of cluster `j`. NLLs computed through it are bitwise identical
    /// to the ones the mixture uses internally.
    pub fn cluster_prior(&self, j: usize) -> GaussianTaskPrior {
        let c = &self.clusters[j];
        GaussianTaskPrior {
            lin_point: self.lin_point.clone(),
            weight_mean: c.weight_mean.clone(),
            cov: CovarianceParam::LowRank {
                basis: self.basis.clone(),
                scales: c.scales.clone(),
            },
            noise_std: self.noise_std,
        }
    }

    fn per_cluster_nll(&self, xc: &BatchInputs, yc: &DVector<f64>) -> Result<Vec<f64>> {
        (0..self.clusters.len())
            .map(|j| gp::nll(&self.cluster_prior(j), xc, yc))
            .collect()
    }
}

/// `log sum exp` with max subtraction, finite whenever one argument is finite.
/// Summands are added in sorted order so the result does not depend on how the
/// caller ordered the values.
pub(crate) fn log_sum_exp(vals: &[f64]) -> f64 {
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let mut shifted: Vec<f64> = vals.iter().map(|&v| (v - max).exp()).collect();
    shifted.sort_by(f64::total_cmp);
    max + shifted.iter().sum::<f64>().ln()
}

/// Mixture NLL: `log alpha - logsumexp(-NLL_1, ..., -NLL_alpha)`.
pub fn mixture_nll(model: &MixtureModel, xc: &BatchInputs, yc: &DVector<f64>) -> Result<f64> {
    let nlls = model.per_cluster_nll(xc, yc)?;
    Ok(mixture_nll_from_components(&nlls))
}

/// Combines per-cluster NLLs; shared with the trainer so the loss it optimizes
/// is the same number the evaluator reports.
pub(crate) fn mixture_nll_from_components(nlls: &[f64]) -> f64 {
    let alpha = nlls.len() as f64;
    let negated: Vec<f64> = nlls.iter().map(|&v| -v).collect();
    alpha.ln() - log_sum_exp(&negated)
}

/// Index of the cluster with the lowest context NLL; ties go to the smallest
/// index.
pub fn infer_cluster(model: &MixtureModel, xc: &BatchInputs, yc: &DVector<f64>) -> Result<usize> {
    let nlls = model.per_cluster_nll(xc, yc)?;
    let mut best = 0;
    for (j, &v) in nlls.iter().enumerate().skip(1) {
        if v < nlls[best] {
            best = j;
        }
    }
    Ok(best)
}

/// Identify the cluster, then condition it on the context data and evaluate
/// the posterior at the queries.
pub fn predict(
    model: &MixtureModel,
    xc: &BatchInputs,
    yc: &DVector<f64>,
    xq: &BatchInputs,
) -> Result<PredictiveGaussian> {
    let j = infer_cluster(model, xc, yc)?;
    gp::posterior_predictive(&model.cluster_prior(j), xc, yc, xq)
}
