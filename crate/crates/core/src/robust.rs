//! Cluster-weighted robust estimation.
//!
//! Each cluster gets a weight from its standardised distance
//! `dᵢ = sqrt(rᵢᵀVᵢ⁻¹rᵢ)` through a Huber-type rule, and the weighted
//! log-likelihood `Σ wᵢ ℓᵢ` is maximised. Weights and fit are alternated until
//! the weights settle. No consistency correction is applied to σ̂_ε.

use serde::{Deserialize, Serialize};

use crate::data::{ClusterBlock, LongitudinalDataset};
use crate::estimation::{
    cluster_residual, fit_with, marginal_covariance, EstimationError, FitMethod, FitOptions, FitResult,
    ParameterSet,
};
use crate::numerics::NumericsError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustConfig {
    /// Tuning constant of the cutoff `√J + k√2`.
    pub k: f64,
    pub max_iter: usize,
    /// Stop when the largest weight change falls below this.
    pub tol: f64,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self { k: 1.345, max_iter: 50, tol: 1e-6 }
    }
}

impl RobustConfig {
    pub fn validate(&self) -> Result<(), EstimationError> {
        if !(self.k > 0.0) {
            return Err(EstimationError::InvalidParameters(format!("tuning constant k = {}", self.k)));
        }
        if !(self.tol > 0.0) {
            return Err(EstimationError::InvalidParameters(format!("tolerance = {}", self.tol)));
        }
        Ok(())
    }
}

/// Mahalanobis length of the cluster residual under `Vᵢ`.
pub fn cluster_distance(block: &ClusterBlock, params: &ParameterSet) -> Result<f64, EstimationError> {
    let r = cluster_residual(block, &params.gamma)?;
    if r.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let v = marginal_covariance(block, params)?;
    if v.is_semidefinite() {
        return Err(EstimationError::Numerics(NumericsError::Singular));
    }
    Ok(v.cholesky().quad_form(&r)?.max(0.0).sqrt())
}

/// Cutoff `√J + k√2`.
pub fn huber_cutoff(j: usize, k: f64) -> f64 {
    (j as f64).sqrt() + k * std::f64::consts::SQRT_2
}

/// `min(1, c/d)` with `c = √J + k√2`.
pub fn huber_weight(d: f64, j: usize, k: f64) -> f64 {
    let c = huber_cutoff(j, k);
    if d <= c {
        1.0
    } else {
        c / d
    }
}

fn weights_at(data: &LongitudinalDataset, params: &ParameterSet, k: f64) -> Result<Vec<f64>, EstimationError> {
    data.clusters
        .iter()
        .map(|c| Ok(huber_weight(cluster_distance(c, params)?, c.len(), k)))
        .collect()
}

/// Iteratively reweighted ML starting from the unweighted fit.
pub fn fit_robust(data: &LongitudinalDataset, config: &RobustConfig) -> Result<FitResult, EstimationError> {
    fit_robust_from(data, config, None)
}

/// As [`fit_robust`], with an optional starting θ for every inner fit.
pub fn fit_robust_from(
    data: &LongitudinalDataset,
    config: &RobustConfig,
    start_theta: Option<Vec<f64>>,
) -> Result<FitResult, EstimationError> {
    config.validate()?;
    let options = FitOptions { start_theta, ..FitOptions::default() };
    let ml = fit_with(data, FitMethod::Ml, &options)?;
    if ml.params.sigma_e == 0.0 {
        return Ok(FitResult { method: FitMethod::Robust, weights: Some(vec![1.0; data.n()]), ..ml });
    }
    let mut weights = weights_at(data, &ml.params, config.k)?;
    let mut current = ml;
    let mut converged = false;
    let mut n_iter = current.n_iter;
    let mut n_eval = current.n_eval;
    for _ in 0..config.max_iter {
        if weights.iter().all(|&w| w == 0.0) {
            return Err(EstimationError::AllWeightsZero);
        }
        let opts = FitOptions {
            start_theta: Some(current.theta.clone()),
            weights: Some(weights.clone()),
            ..FitOptions::default()
        };
        current = fit_with(data, FitMethod::Robust, &opts)?;
        n_iter += current.n_iter;
        n_eval += current.n_eval;
        if current.params.sigma_e == 0.0 {
            converged = current.converged;
            break;
        }
        let next = weights_at(data, &current.params, config.k)?;
        let change = next.iter().zip(&weights).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        weights = next;
        if change < config.tol {
            converged = current.converged;
            break;
        }
    }
    Ok(FitResult { weights: Some(weights), converged, n_iter, n_eval, ..current })
}
