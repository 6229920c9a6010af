//! Maximum likelihood and REML fitting of the linear mixed model
//! `yᵢ = Xᵢγ + Zᵢbᵢ + εᵢ`, `bᵢ ~ N(0, Σ)`, `εᵢ ~ N(0, σ²I)`.

pub mod optimizer;
pub mod profile;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ClusterBlock, LongitudinalDataset};
use crate::numerics::{cholesky, Matrix, NumericsError, SpdMatrix};
use crate::robust::{fit_robust, fit_robust_from, RobustConfig};
use optimizer::{minimize, NelderMeadOptions};
use profile::{diagonal_positions, lambda_from_theta, theta_from_lambda, Criterion, ProfiledModel};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EstimationError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("fixed-effects design is rank deficient")]
    RankDeficient,

    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    #[error("at least {required} clusters are required, found {found}")]
    TooFewClusters { required: usize, found: usize },

    #[error("all robustness weights are zero")]
    AllWeightsZero,

    #[error("objective is not finite at the starting values")]
    NonFiniteStart,

    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FitMethod {
    #[serde(rename = "ML")]
    Ml,
    #[serde(rename = "REML")]
    Reml,
    #[serde(rename = "ROBUST")]
    Robust,
}

impl fmt::Display for FitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitMethod::Ml => "ML",
            FitMethod::Reml => "REML",
            FitMethod::Robust => "ROBUST",
        })
    }
}

impl std::str::FromStr for FitMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ml" => Ok(FitMethod::Ml),
            "reml" => Ok(FitMethod::Reml),
            "robust" => Ok(FitMethod::Robust),
            other => Err(format!("unknown fit method `{other}` (expected ml, reml or robust)")),
        }
    }
}

/// Model parameters on the natural scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub gamma: Vec<f64>,
    /// Random-effects covariance Σ (q × q).
    pub sigma: Matrix,
    /// Residual standard deviation σ_ε.
    pub sigma_e: f64,
}

impl ParameterSet {
    pub fn sigma_e2(&self) -> f64 {
        self.sigma_e * self.sigma_e
    }

    pub fn validate(&self, p: usize, q: usize) -> Result<(), EstimationError> {
        if self.gamma.len() != p {
            return Err(EstimationError::DimensionMismatch(format!(
                "gamma has length {}, design has {p} columns",
                self.gamma.len()
            )));
        }
        if self.sigma.rows() != q || self.sigma.cols() != q {
            return Err(EstimationError::DimensionMismatch(format!(
                "Sigma is {}x{}, expected {q}x{q}",
                self.sigma.rows(),
                self.sigma.cols()
            )));
        }
        if !(self.sigma_e >= 0.0) || !self.sigma_e.is_finite() {
            return Err(EstimationError::InvalidParameters(format!("sigma_e = {}", self.sigma_e)));
        }
        SpdMatrix::new(self.sigma.clone())?;
        Ok(())
    }
}

/// Category of a reported parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Fixed,
    StdDev,
    Correlation,
    ResidualStdDev,
}

/// Labels used for reporting: fixed-effect terms, random-effect terms and the
/// cluster variable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterNames {
    pub fixed: Vec<String>,
    pub random: Vec<String>,
    pub cluster: String,
}

impl ParameterNames {
    pub fn from_dataset(data: &LongitudinalDataset) -> Self {
        Self {
            fixed: data.fixed_names.clone(),
            random: data.random_names.clone(),
            cluster: data.cluster_var().to_string(),
        }
    }

    pub fn p(&self) -> usize {
        self.fixed.len()
    }

    pub fn q(&self) -> usize {
        self.random.len()
    }

    /// `K = p + q + q(q−1)/2 + 1`.
    pub fn count(&self) -> usize {
        reported_len(self.p(), self.q())
    }

    /// Reported names in output order: fixed effects, random-effect SDs,
    /// correlations (row-major over pairs `i < j`), residual SD.
    pub fn labels(&self) -> Vec<(String, ParamKind)> {
        let mut out: Vec<(String, ParamKind)> =
            self.fixed.iter().map(|n| (n.clone(), ParamKind::Fixed)).collect();
        for r in &self.random {
            out.push((format!("Sigma {} {}", self.cluster, r), ParamKind::StdDev));
        }
        for i in 0..self.q() {
            for j in (i + 1)..self.q() {
                out.push((
                    format!("Sigma {} {} {}", self.cluster, self.random[i], self.random[j]),
                    ParamKind::Correlation,
                ));
            }
        }
        out.push(("Sigma Residual".to_string(), ParamKind::ResidualStdDev));
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.labels().into_iter().map(|(n, _)| n).collect()
    }

    pub fn kinds(&self) -> Vec<ParamKind> {
        self.labels().into_iter().map(|(_, k)| k).collect()
    }
}

/// Number of reported parameters for `p` fixed and `q` random effects.
pub fn reported_len(p: usize, q: usize) -> usize {
    p + q + q * q.saturating_sub(1) / 2 + 1
}

/// Parameters on the reporting scale: fixed effects, SDs, correlations and
/// the residual SD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportedParameters {
    pub names: Vec<String>,
    pub kinds: Vec<ParamKind>,
    pub values: Vec<f64>,
}

impl ReportedParameters {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }
}

/// Values in reported order, without names.
pub fn reported_values(params: &ParameterSet) -> Vec<f64> {
    let q = params.sigma.rows();
    let mut out = params.gamma.clone();
    let sds: Vec<f64> = (0..q).map(|i| params.sigma[(i, i)].max(0.0).sqrt()).collect();
    out.extend_from_slice(&sds);
    for i in 0..q {
        for j in (i + 1)..q {
            let denom = sds[i] * sds[j];
            let r = if denom > 0.0 { (params.sigma[(i, j)] / denom).clamp(-1.0, 1.0) } else { 0.0 };
            out.push(r);
        }
    }
    out.push(params.sigma_e);
    out
}

pub fn to_reported(params: &ParameterSet, names: &ParameterNames) -> ReportedParameters {
    ReportedParameters { names: names.names(), kinds: names.kinds(), values: reported_values(params) }
}

/// Inverse of [`reported_values`] for `p` fixed and `q` random effects.
pub fn from_reported(values: &[f64], p: usize, q: usize) -> Result<ParameterSet, EstimationError> {
    if values.len() != reported_len(p, q) {
        return Err(EstimationError::DimensionMismatch(format!(
            "{} reported values, expected {}",
            values.len(),
            reported_len(p, q)
        )));
    }
    let sds = &values[p..p + q];
    let mut sigma = Matrix::zeros(q, q);
    let mut k = p + q;
    for i in 0..q {
        sigma[(i, i)] = sds[i] * sds[i];
        for j in (i + 1)..q {
            let v = values[k] * sds[i] * sds[j];
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
            k += 1;
        }
    }
    Ok(ParameterSet { gamma: values[..p].to_vec(), sigma, sigma_e: values[k] })
}

/// Outcome of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ParameterSet,
    pub se_gamma: Vec<f64>,
    pub cov_gamma: Matrix,
    /// ML log-likelihood at `params`, whatever the fitting criterion.
    pub loglik: f64,
    /// `-2 · loglik`.
    pub deviance: f64,
    /// Minimised REML criterion, for REML fits.
    pub reml_criterion: Option<f64>,
    pub method: FitMethod,
    pub converged: bool,
    /// A variance component sits on the boundary of the parameter space.
    pub boundary: bool,
    pub n_iter: usize,
    pub n_eval: usize,
    /// Per-cluster robustness weights (robust fits only).
    pub weights: Option<Vec<f64>>,
    /// Relative Cholesky factor entries `Λ = chol(Σ/σ²)`, column-major lower triangle.
    pub theta: Vec<f64>,
    pub names: ParameterNames,
}

impl FitResult {
    pub fn reported(&self) -> ReportedParameters {
        to_reported(&self.params, &self.names)
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Starting θ; derived from per-cluster OLS when absent.
    pub start_theta: Option<Vec<f64>>,
    /// Per-cluster likelihood weights in `[0, 1]`.
    pub weights: Option<Vec<f64>>,
    pub optimizer: NelderMeadOptions,
}

/// Diagonal entries of Λ below this are probed for a boundary optimum.
const BOUNDARY_PROBE: f64 = 0.05;
/// Diagonal entries of Λ below this are reported as exactly zero.
const BOUNDARY_ZERO: f64 = 1e-8;

/// Fits by ML, REML, or the cluster-weighted robust estimator with default
/// tuning.
pub fn fit(data: &LongitudinalDataset, method: FitMethod) -> Result<FitResult, EstimationError> {
    match method {
        FitMethod::Robust => fit_robust(data, &RobustConfig::default()),
        _ => fit_with(data, method, &FitOptions::default()),
    }
}

/// A fitting procedure, including robust tuning.
#[derive(Debug, Clone, PartialEq)]
pub enum Estimator {
    Ml,
    Reml,
    Robust(RobustConfig),
}

impl Estimator {
    pub fn method(&self) -> FitMethod {
        match self {
            Estimator::Ml => FitMethod::Ml,
            Estimator::Reml => FitMethod::Reml,
            Estimator::Robust(_) => FitMethod::Robust,
        }
    }

    pub fn fit(
        &self,
        data: &LongitudinalDataset,
        start_theta: Option<Vec<f64>>,
    ) -> Result<FitResult, EstimationError> {
        match self {
            Estimator::Robust(config) => fit_robust_from(data, config, start_theta),
            _ => fit_with(data, self.method(), &FitOptions { start_theta, ..FitOptions::default() }),
        }
    }
}

impl From<FitMethod> for Estimator {
    fn from(method: FitMethod) -> Self {
        match method {
            FitMethod::Ml => Estimator::Ml,
            FitMethod::Reml => Estimator::Reml,
            FitMethod::Robust => Estimator::Robust(RobustConfig::default()),
        }
    }
}

/// Fits with explicit options. `FitMethod::Robust` here means a single
/// weighted ML fit with `options.weights`.
pub fn fit_with(
    data: &LongitudinalDataset,
    method: FitMethod,
    options: &FitOptions,
) -> Result<FitResult, EstimationError> {
    if data.n() < 2 {
        return Err(EstimationError::TooFewClusters { required: 2, found: data.n() });
    }
    let names = ParameterNames::from_dataset(data);
    let model = ProfiledModel::new(data, options.weights.clone())?;
    if let Some(w) = &options.weights {
        if w.iter().all(|&v| v == 0.0) {
            return Err(EstimationError::AllWeightsZero);
        }
    }
    let q = model.q();
    let p = model.p();
    let n_theta = profile::theta_len(q);
    if model.is_degenerate() {
        return Ok(FitResult {
            params: ParameterSet {
                gamma: model.gamma_ols().to_vec(),
                sigma: Matrix::zeros(q, q),
                sigma_e: 0.0,
            },
            se_gamma: vec![0.0; p],
            cov_gamma: Matrix::zeros(p, p),
            loglik: f64::INFINITY,
            deviance: f64::NEG_INFINITY,
            reml_criterion: (method == FitMethod::Reml).then_some(f64::NEG_INFINITY),
            method,
            converged: true,
            boundary: true,
            n_iter: 0,
            n_eval: 0,
            weights: options.weights.clone(),
            theta: vec![0.0; n_theta],
            names,
        });
    }
    let criterion = if method == FitMethod::Reml { Criterion::Reml } else { Criterion::Ml };
    let theta0 = match &options.start_theta {
        Some(t) if t.len() == n_theta && t.iter().all(|v| v.is_finite()) => t.clone(),
        Some(t) => {
            return Err(EstimationError::InvalidParameters(format!(
                "start theta has length {}, expected {n_theta}",
                t.len()
            )))
        }
        None => start_theta(data),
    };
    let objective = |t: &[f64]| model.objective(t, criterion);
    let theta0 = if objective(&theta0).is_finite() { theta0 } else { identity_theta(q) };
    if !objective(&theta0).is_finite() {
        return Err(EstimationError::NonFiniteStart);
    }
    let best = minimize(objective, &theta0, &options.optimizer);
    let mut theta = best.x.clone();
    let mut f_best = best.f;
    let mut n_iter = best.iterations;
    let mut n_eval = best.evaluations;
    let diag = diagonal_positions(q);
    for &d in &diag {
        theta[d] = theta[d].abs();
    }
    for &d in &diag {
        if theta[d] == 0.0 || theta[d] >= BOUNDARY_PROBE {
            continue;
        }
        let free: Vec<usize> = (0..n_theta).filter(|&i| i != d).collect();
        let expand = |u: &[f64]| {
            let mut t = theta.clone();
            t[d] = 0.0;
            for (&i, &v) in free.iter().zip(u) {
                t[i] = v;
            }
            t
        };
        let u0: Vec<f64> = free.iter().map(|&i| theta[i]).collect();
        let sub = minimize(|u: &[f64]| model.objective(&expand(u), criterion), &u0, &options.optimizer);
        n_iter += sub.iterations;
        n_eval += sub.evaluations;
        if sub.f <= f_best + 1e-10 * (f_best.abs() + 1.0) {
            theta = expand(&sub.x);
            f_best = sub.f.min(f_best);
        }
    }
    for &d in &diag {
        theta[d] = theta[d].abs();
        if theta[d] < BOUNDARY_ZERO {
            theta[d] = 0.0;
        }
    }
    finish(&model, theta, criterion, method, names, options, best.converged, n_iter, n_eval)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    model: &ProfiledModel,
    theta: Vec<f64>,
    criterion: Criterion,
    method: FitMethod,
    names: ParameterNames,
    options: &FitOptions,
    converged: bool,
    n_iter: usize,
    n_eval: usize,
) -> Result<FitResult, EstimationError> {
    let q = model.q();
    let eval = model.evaluate(&theta, criterion)?;
    let sigma2 = eval.sigma2;
    let lambda = lambda_from_theta(&theta, q);
    let mut sigma = lambda.matmul(&lambda.transpose())?.scale(sigma2);
    sigma.mirror_lower();
    let inv = cholesky(&eval.xtaix)?.inverse()?;
    let cov_gamma = inv.scale(sigma2);
    let se_gamma = (0..model.p()).map(|i| cov_gamma[(i, i)].max(0.0).sqrt()).collect();
    let deviance = model.ml_deviance_at(&theta, &eval.gamma, sigma2);
    let boundary = diagonal_positions(q).iter().any(|&d| theta[d] == 0.0) || sigma2 == 0.0;
    Ok(FitResult {
        params: ParameterSet { gamma: eval.gamma, sigma, sigma_e: sigma2.sqrt() },
        se_gamma,
        cov_gamma,
        loglik: -0.5 * deviance,
        deviance,
        reml_criterion: (criterion == Criterion::Reml).then_some(eval.objective),
        method,
        converged,
        boundary,
        n_iter,
        n_eval,
        weights: options.weights.clone(),
        theta,
        names,
    })
}

fn identity_theta(q: usize) -> Vec<f64> {
    theta_from_lambda(&Matrix::identity(q))
}

/// Starting θ from per-cluster OLS fits of the global OLS residuals on `Zᵢ`.
pub fn start_theta(data: &LongitudinalDataset) -> Vec<f64> {
    let q = data.q();
    let fallback = identity_theta(q);
    let x = data.stacked_x();
    let y = data.stacked_y();
    let Ok(chol) = cholesky(&x.gram()) else { return fallback };
    let Ok(xty) = x.t_mul_vec(&y) else { return fallback };
    let Ok(gamma) = chol.solve(&xty) else { return fallback };
    let mut coefs: Vec<Vec<f64>> = Vec::new();
    let mut rss = 0.0;
    let mut dof = 0.0;
    for c in &data.clusters {
        if c.len() <= q {
            continue;
        }
        let Ok(fitted) = c.x.mul_vec(&gamma) else { continue };
        let r: Vec<f64> = c.y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
        let Ok(cz) = cholesky(&c.z.gram()) else { continue };
        if cz.is_semidefinite() {
            continue;
        }
        let Ok(b) = c.z.t_mul_vec(&r).and_then(|v| cz.solve(&v)) else { continue };
        let Ok(fz) = c.z.mul_vec(&b) else { continue };
        rss += r.iter().zip(&fz).map(|(a, f)| (a - f).powi(2)).sum::<f64>();
        dof += (c.len() - q) as f64;
        coefs.push(b);
    }
    if coefs.len() < 2 || dof == 0.0 || rss <= 0.0 {
        return fallback;
    }
    let s2 = rss / dof;
    let m = coefs.len() as f64;
    let mut cov = Matrix::zeros(q, q);
    for i in 0..q {
        let mi = coefs.iter().map(|b| b[i]).sum::<f64>() / m;
        for j in 0..q {
            let mj = coefs.iter().map(|b| b[j]).sum::<f64>() / m;
            cov[(i, j)] = coefs.iter().map(|b| (b[i] - mi) * (b[j] - mj)).sum::<f64>() / (m - 1.0) / s2;
        }
    }
    match cholesky(&cov) {
        Ok(l) if !l.is_semidefinite() && l.factor().is_finite() => theta_from_lambda(l.factor()),
        _ => {
            let d: Vec<f64> =
                (0..q).map(|i| if cov[(i, i)] > 0.0 { cov[(i, i)].sqrt() } else { 1.0 }).collect();
            theta_from_lambda(&Matrix::diagonal(&d))
        }
    }
}

/// `Vᵢ = Zᵢ Σ Zᵢᵀ + σ² I`.
pub fn marginal_covariance(block: &ClusterBlock, params: &ParameterSet) -> Result<SpdMatrix, EstimationError> {
    let q = block.z.cols();
    if params.sigma.rows() != q || params.sigma.cols() != q {
        return Err(EstimationError::DimensionMismatch(format!(
            "Sigma is {}x{}, Z has {q} columns",
            params.sigma.rows(),
            params.sigma.cols()
        )));
    }
    let mut v = block.z.matmul(&params.sigma)?.matmul(&block.z.transpose())?;
    let s2 = params.sigma_e2();
    for i in 0..block.len() {
        v[(i, i)] += s2;
    }
    v.mirror_lower();
    Ok(SpdMatrix::new(v)?)
}

/// Per-cluster residual `yᵢ − Xᵢγ`.
pub fn cluster_residual(block: &ClusterBlock, gamma: &[f64]) -> Result<Vec<f64>, EstimationError> {
    let fitted = block.x.mul_vec(gamma)?;
    Ok(block.y.iter().zip(&fitted).map(|(a, b)| a - b).collect())
}

/// Log-likelihood evaluated directly from the dense `Vᵢ`; `restricted` adds
/// the REML correction `−½ log det(Σ XᵢᵀVᵢ⁻¹Xᵢ) + (p/2) log 2π`.
pub fn log_likelihood(
    params: &ParameterSet,
    data: &LongitudinalDataset,
    restricted: bool,
) -> Result<f64, EstimationError> {
    params.validate(data.p(), data.q())?;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let p = data.p();
    let mut ll = 0.0;
    let mut info = Matrix::zeros(p, p);
    for c in &data.clusters {
        let v = marginal_covariance(c, params)?;
        let chol = v.cholesky();
        if chol.is_semidefinite() {
            return Err(EstimationError::Numerics(NumericsError::Singular));
        }
        let r = cluster_residual(c, &params.gamma)?;
        ll -= 0.5 * (c.len() as f64 * ln2pi + chol.log_det() + chol.quad_form(&r)?);
        if restricted {
            info = add(&info, &gls_block(chol, &c.x)?)?;
        }
    }
    if restricted {
        let ci = cholesky(&info)?;
        if ci.is_semidefinite() {
            return Err(EstimationError::RankDeficient);
        }
        ll += -0.5 * ci.log_det() + 0.5 * p as f64 * ln2pi;
    }
    Ok(ll)
}

fn add(a: &Matrix, b: &Matrix) -> Result<Matrix, EstimationError> {
    let data: Vec<f64> = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x + y).collect();
    Ok(Matrix::from_row_slice(a.rows(), a.cols(), &data)?)
}

/// `Xᵀ V⁻¹ X` for one cluster.
fn gls_block(chol: &crate::numerics::Cholesky, x: &Matrix) -> Result<Matrix, EstimationError> {
    let p = x.cols();
    let cols: Vec<Vec<f64>> = (0..p).map(|j| chol.solve(&x.column(j))).collect::<Result<_, _>>()?;
    let mut out = Matrix::zeros(p, p);
    for i in 0..p {
        let xi = x.column(i);
        for j in 0..p {
            out[(i, j)] = crate::numerics::dot(&xi, &cols[j]);
        }
    }
    out.mirror_lower();
    Ok(out)
}

/// Generalised least squares for γ given the variance parameters:
/// `γ̂ = (Σ XᵢᵀVᵢ⁻¹Xᵢ)⁻¹ Σ XᵢᵀVᵢ⁻¹yᵢ` and its covariance `(Σ XᵢᵀVᵢ⁻¹Xᵢ)⁻¹`.
pub fn gls_fixed_effects(
    data: &LongitudinalDataset,
    sigma: &Matrix,
    sigma_e: f64,
) -> Result<(Vec<f64>, Matrix), EstimationError> {
    let p = data.p();
    let params = ParameterSet { gamma: vec![0.0; p], sigma: sigma.clone(), sigma_e };
    let mut info = Matrix::zeros(p, p);
    let mut score = vec![0.0; p];
    for c in &data.clusters {
        let v = marginal_covariance(c, &params)?;
        let chol = v.cholesky();
        if chol.is_semidefinite() {
            return Err(EstimationError::Numerics(NumericsError::Singular));
        }
        info = add(&info, &gls_block(chol, &c.x)?)?;
        let vy = chol.solve(&c.y)?;
        for (s, xv) in score.iter_mut().zip(c.x.t_mul_vec(&vy)?) {
            *s += xv;
        }
    }
    let ci = cholesky(&info)?;
    if ci.is_semidefinite() {
        return Err(EstimationError::RankDeficient);
    }
    Ok((ci.solve(&score)?, ci.inverse()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn medsim_params() -> ParameterSet {
        ParameterSet {
            gamma: vec![167.46, -3.11, -2.42, 4.00],
            sigma: Matrix::from_rows(&[vec![2111.54, -121.63], vec![-121.63, 63.74]]).unwrap(),
            sigma_e: 1229.93_f64.sqrt(),
        }
    }

    fn names() -> ParameterNames {
        ParameterNames {
            fixed: vec!["(Intercept)".into(), "treat".into(), "time".into(), "treat:time".into()],
            random: vec!["(Intercept)".into(), "time".into()],
            cluster: "id".into(),
        }
    }

    #[test]
    fn reported_names_follow_printout() {
        assert_eq!(
            names().names(),
            vec![
                "(Intercept)",
                "treat",
                "time",
                "treat:time",
                "Sigma id (Intercept)",
                "Sigma id time",
                "Sigma id (Intercept) time",
                "Sigma Residual"
            ]
        );
        assert_eq!(names().count(), 8);
    }

    #[test]
    fn reported_medsim_truth() {
        let r = to_reported(&medsim_params(), &names());
        assert!((r.values[4] - 45.95).abs() < 0.01);
        assert!((r.values[5] - 7.98).abs() < 0.01);
        assert!((r.values[6] + 0.332).abs() < 0.001);
        assert!((r.values[7] - 35.07).abs() < 0.01);
    }

    #[test]
    fn reported_simple_cases() {
        let mut p = medsim_params();
        p.sigma = Matrix::identity(2);
        assert_eq!(&reported_values(&p)[4..7], &[1.0, 1.0, 0.0]);
        p.sigma = Matrix::from_rows(&[vec![4.0, -2.0], vec![-2.0, 4.0]]).unwrap();
        assert_eq!(&reported_values(&p)[4..7], &[2.0, 2.0, -0.5]);
        p.sigma = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 4.0]]).unwrap();
        assert_eq!(reported_values(&p)[6], 0.0);
    }

    #[test]
    fn reported_round_trip() {
        let p = medsim_params();
        let back = from_reported(&reported_values(&p), 4, 2).unwrap();
        assert_eq!(back.gamma, p.gamma);
        assert!(back.sigma.max_abs_diff(&p.sigma) < 1e-9);
        assert!((back.sigma_e - p.sigma_e).abs() < 1e-12);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("ML".parse::<FitMethod>().unwrap(), FitMethod::Ml);
        assert_eq!("reml".parse::<FitMethod>().unwrap(), FitMethod::Reml);
        assert!("bayes".parse::<FitMethod>().is_err());
        assert_eq!(serde_json::to_string(&FitMethod::Robust).unwrap(), "\"ROBUST\"");
    }
}
