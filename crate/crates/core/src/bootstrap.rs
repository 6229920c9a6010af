//! Parametric and wild bootstrap resampling, the parallel replicate engine
//! and the leave-one-cluster-out jackknife.
//!
//! Replicate `k` draws from `RandomStream::derive(seed, k, attempt)`, so the
//! results do not depend on the number of threads or on scheduling order.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, LongitudinalDataset};
use crate::estimation::{
    cluster_residual, fit_with, reported_values, EstimationError, Estimator, FitMethod, FitOptions, FitResult,
    ParamKind, ParameterNames, ParameterSet,
};
use crate::numerics::{cholesky, mvnormal_draw, normal_draw, NumericsError, RandomStream, SpdMatrix};

/// Leverages at or above `1 - LEVERAGE_LIMIT` are rejected.
pub const LEVERAGE_LIMIT: f64 = 1e-10;
/// Fresh draws tried after a failed refit before the replicate is dropped.
pub const MAX_RETRIES: u32 = 3;
/// Largest tolerated share of dropped replicates.
pub const MAX_FAILED_FRACTION: f64 = 0.1;

#[derive(Debug, Error)]
pub enum BootstrapError {
    #[error("the original fit did not converge")]
    NotConverged,

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("leverage {value} of row {row} in cluster `{cluster}` is too close to 1")]
    Leverage { cluster: String, row: usize, value: f64 },

    #[error("{failed} of {requested} bootstrap refits failed (more than 10%)")]
    TooManyFailures { failed: usize, requested: usize },

    #[error("jackknife refit without cluster `{cluster}` failed: {source}")]
    Jackknife { cluster: String, source: EstimationError },

    #[error("could not build thread pool: {0}")]
    ThreadPool(String),

    #[error(transparent)]
    Estimation(#[from] EstimationError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Support points and lower-point probability of the Mammen two-point law:
/// `(−(√5−1)/2, (√5+1)/2, (√5+1)/(2√5))`.
pub fn mammen_law() -> (f64, f64, f64) {
    let s5 = 5.0_f64.sqrt();
    (-(s5 - 1.0) / 2.0, (s5 + 1.0) / 2.0, (s5 + 1.0) / (2.0 * s5))
}

/// One draw from the Mammen law (mean 0, variance 1, third moment 1).
pub fn mammen_draw(rng: &mut RandomStream) -> f64 {
    let (low, high, p) = mammen_law();
    if rng.uniform() < p {
        low
    } else {
        high
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BootScheme {
    Parametric,
    Wild,
}

impl fmt::Display for BootScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BootScheme::Parametric => "parametric",
            BootScheme::Wild => "wild",
        })
    }
}

impl std::str::FromStr for BootScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "parametric" => Ok(BootScheme::Parametric),
            "wild" => Ok(BootScheme::Wild),
            other => Err(format!("unknown bootstrap type `{other}` (expected wild or parametric)")),
        }
    }
}

/// Fitted values, leverages and leverage-adjusted residuals for the wild
/// bootstrap, one vector per cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct WildPrecomputation {
    pub fitted: Vec<Vec<f64>>,
    /// `υ̃ᵢ = (1 − hⱼ)^(−1/2) ∘ (yᵢ − Xᵢγ̂)`.
    pub residual_adjusted: Vec<Vec<f64>>,
    /// Diagonal of `X(XᵀX)⁻¹Xᵀ` for the stacked design, sliced per cluster.
    pub leverage_diag: Vec<Vec<f64>>,
}

pub fn wild_precompute(
    data: &LongitudinalDataset,
    gamma_hat: &[f64],
) -> Result<WildPrecomputation, BootstrapError> {
    if gamma_hat.len() != data.p() {
        return Err(BootstrapError::Invalid(format!(
            "gamma has length {}, design has {} columns",
            gamma_hat.len(),
            data.p()
        )));
    }
    let chol = cholesky(&data.stacked_x().gram())?;
    if chol.is_semidefinite() {
        return Err(EstimationError::RankDeficient.into());
    }
    let mut out = WildPrecomputation {
        fitted: Vec::with_capacity(data.n()),
        residual_adjusted: Vec::with_capacity(data.n()),
        leverage_diag: Vec::with_capacity(data.n()),
    };
    for c in &data.clusters {
        let mut h = Vec::with_capacity(c.len());
        for (j, row) in (0..c.len()).map(|j| (j, c.x.row(j))) {
            let v = chol.forward(row)?;
            let hj: f64 = v.iter().map(|a| a * a).sum();
            if !(hj < 1.0 - LEVERAGE_LIMIT) {
                return Err(BootstrapError::Leverage { cluster: c.id.clone(), row: j, value: hj });
            }
            h.push(hj.max(0.0));
        }
        let r = cluster_residual(c, gamma_hat)?;
        out.residual_adjusted.push(r.iter().zip(&h).map(|(ri, hj)| ri / (1.0 - hj).sqrt()).collect());
        out.fitted.push(c.x.mul_vec(gamma_hat)?);
        out.leverage_diag.push(h);
    }
    Ok(out)
}

/// `y*ᵢ = Xᵢγ̂ + υ̃ᵢ w*ᵢ` for given multipliers, one per cluster.
pub fn wild_responses(pre: &WildPrecomputation, multipliers: &[f64]) -> Vec<Vec<f64>> {
    pre.fitted
        .iter()
        .zip(&pre.residual_adjusted)
        .zip(multipliers)
        .map(|((f, u), &w)| f.iter().zip(u).map(|(a, b)| a + b * w).collect())
        .collect()
}

/// Wild resample with one Mammen multiplier per cluster.
pub fn wild_resample(pre: &WildPrecomputation, rng: &mut RandomStream) -> Vec<Vec<f64>> {
    let w: Vec<f64> = (0..pre.fitted.len()).map(|_| mammen_draw(rng)).collect();
    wild_responses(pre, &w)
}

/// Parametric resample `y*ᵢ = Xᵢγ̂ + Zᵢb*ᵢ + ε*ᵢ` with `b*ᵢ ~ N(0, Σ̂)` and
/// `ε*ᵢ ~ N(0, σ̂²I)`.
pub fn parametric_resample(
    data: &LongitudinalDataset,
    params: &ParameterSet,
    rng: &mut RandomStream,
) -> Result<Vec<Vec<f64>>, BootstrapError> {
    params.validate(data.p(), data.q())?;
    let sigma = SpdMatrix::new(params.sigma.clone())?;
    parametric_with(data, params, &sigma, rng)
}

fn parametric_with(
    data: &LongitudinalDataset,
    params: &ParameterSet,
    sigma: &SpdMatrix,
    rng: &mut RandomStream,
) -> Result<Vec<Vec<f64>>, BootstrapError> {
    let zero = vec![0.0; data.q()];
    let mut out = Vec::with_capacity(data.n());
    for c in &data.clusters {
        let b = mvnormal_draw(rng, &zero, sigma)?;
        let mean = c.x.mul_vec(&params.gamma)?;
        let zb = c.z.mul_vec(&b)?;
        let y = mean
            .iter()
            .zip(&zb)
            .map(|(m, u)| normal_draw(rng, m + u, params.sigma_e))
            .collect::<Result<Vec<f64>, _>>()?;
        out.push(y);
    }
    Ok(out)
}

/// Replicate estimates on the reported scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRun {
    pub names: Vec<String>,
    pub kinds: Vec<ParamKind>,
    /// One row per successful replicate, in replicate order.
    pub estimates: Vec<Vec<f64>>,
    /// Replicate index `k` (1-based) of each row.
    pub replicates: Vec<u64>,
    pub scheme: BootScheme,
    pub requested_b: usize,
    pub n_failed: usize,
    pub seed: u64,
    pub refit_method: FitMethod,
}

impl BootstrapRun {
    pub fn n_ok(&self) -> usize {
        self.estimates.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.estimates.iter().map(|r| r[j]).collect()
    }

    /// Writes the estimate matrix as CSV with a `replicate` column.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = vec!["replicate".to_string()];
        header.extend(self.names.iter().map(|n| csv_field(n)));
        writeln!(w, "{}", header.join(","))?;
        for (k, row) in self.replicates.iter().zip(&self.estimates) {
            let mut line = k.to_string();
            for v in row {
                line.push(',');
                line.push_str(&format!("{v:?}"));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Runs `f` on a dedicated pool with `threads` workers.
pub fn with_thread_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, BootstrapError> {
    if threads == 0 {
        return Err(BootstrapError::Invalid("thread count must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| BootstrapError::ThreadPool(e.to_string()))?;
    Ok(pool.install(f))
}

fn usable(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

/// Resamples `b` times from `fit` by `scheme` and refits each resample by ML,
/// starting from the original variance parameters.
pub fn run_bootstrap(
    fit: &FitResult,
    data: &LongitudinalDataset,
    b: usize,
    scheme: BootScheme,
    seed: u64,
    threads: usize,
) -> Result<BootstrapRun, BootstrapError> {
    if !fit.converged {
        return Err(BootstrapError::NotConverged);
    }
    if b == 0 {
        return Err(BootstrapError::Invalid("number of resamples must be at least 1".into()));
    }
    fit.params.validate(data.p(), data.q())?;
    let wild = match scheme {
        BootScheme::Wild => Some(wild_precompute(data, &fit.params.gamma)?),
        BootScheme::Parametric => None,
    };
    let sigma = SpdMatrix::new(fit.params.sigma.clone())?;
    let options = FitOptions { start_theta: Some(fit.theta.clone()), ..FitOptions::default() };
    let replicate = |k: u64| -> Option<Vec<f64>> {
        for attempt in 0..=MAX_RETRIES {
            let mut rng = RandomStream::derive(seed, k, attempt);
            let ys = match &wild {
                Some(pre) => wild_resample(pre, &mut rng),
                None => match parametric_with(data, &fit.params, &sigma, &mut rng) {
                    Ok(ys) => ys,
                    Err(_) => continue,
                },
            };
            let Ok(resampled) = data.with_responses(ys) else { continue };
            match fit_with(&resampled, FitMethod::Ml, &options) {
                Ok(refit) if refit.converged => {
                    let row = reported_values(&refit.params);
                    if usable(&row) {
                        return Some(row);
                    }
                }
                _ => {}
            }
        }
        None
    };
    let rows: Vec<Option<Vec<f64>>> =
        with_thread_pool(threads, || (1..=b as u64).into_par_iter().map(replicate).collect())?;
    let n_failed = rows.iter().filter(|r| r.is_none()).count();
    if n_failed as f64 > MAX_FAILED_FRACTION * b as f64 {
        return Err(BootstrapError::TooManyFailures { failed: n_failed, requested: b });
    }
    let mut estimates = Vec::with_capacity(b - n_failed);
    let mut replicates = Vec::with_capacity(b - n_failed);
    for (k, row) in (1..=b as u64).zip(rows) {
        if let Some(row) = row {
            replicates.push(k);
            estimates.push(row);
        }
    }
    Ok(BootstrapRun {
        names: fit.names.names(),
        kinds: fit.names.kinds(),
        estimates,
        replicates,
        scheme,
        requested_b: b,
        n_failed,
        seed,
        refit_method: FitMethod::Ml,
    })
}

/// Leave-one-cluster-out estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JackknifeRun {
    pub names: Vec<String>,
    /// Row `i` is the estimate without cluster `i`.
    pub estimates: Vec<Vec<f64>>,
    /// Column means of `estimates`.
    pub mean_row: Vec<f64>,
    pub cluster_ids: Vec<String>,
}

impl JackknifeRun {
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.estimates.iter().map(|r| r[j]).collect()
    }
}

/// Generic jackknife: `estimator` is applied to the data without each cluster
/// in turn, in parallel.
pub fn jackknife<F>(
    data: &LongitudinalDataset,
    names: Vec<String>,
    threads: usize,
    estimator: F,
) -> Result<JackknifeRun, BootstrapError>
where
    F: Fn(&LongitudinalDataset) -> Result<Vec<f64>, EstimationError> + Sync,
{
    let n = data.n();
    if n < 3 {
        return Err(BootstrapError::Invalid(format!("the jackknife needs at least 3 clusters, found {n}")));
    }
    let rows: Vec<Result<Vec<f64>, EstimationError>> = with_thread_pool(threads, || {
        (0..n).into_par_iter().map(|i| estimator(&data.without_cluster(i))).collect()
    })?;
    let mut estimates = Vec::with_capacity(n);
    for (i, row) in rows.into_iter().enumerate() {
        let row = row.map_err(|source| BootstrapError::Jackknife { cluster: data.clusters[i].id.clone(), source })?;
        estimates.push(row);
    }
    let k = estimates.first().map_or(0, Vec::len);
    if estimates.iter().any(|r| r.len() != k) {
        return Err(BootstrapError::Invalid("jackknife rows differ in length".into()));
    }
    let mean_row = (0..k).map(|j| estimates.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    Ok(JackknifeRun {
        names,
        estimates,
        mean_row,
        cluster_ids: data.clusters.iter().map(|c| c.id.clone()).collect(),
    })
}

/// Jackknife of a mixed-model estimator on the reported scale. Each refit
/// starts from `start_theta`, then from default starting values if that fails.
pub fn jackknife_run(
    data: &LongitudinalDataset,
    estimator: &Estimator,
    start_theta: Option<Vec<f64>>,
    threads: usize,
) -> Result<JackknifeRun, BootstrapError> {
    let names = ParameterNames::from_dataset(data).names();
    jackknife(data, names, threads, |d| {
        let attempt = |start: Option<Vec<f64>>| -> Result<Vec<f64>, EstimationError> {
            let f = estimator.fit(d, start)?;
            let row = reported_values(&f.params);
            if !f.converged || !usable(&row) {
                return Err(EstimationError::InvalidParameters("refit did not converge".into()));
            }
            Ok(row)
        };
        match attempt(start_theta.clone()) {
            Ok(row) => Ok(row),
            Err(e) if start_theta.is_none() => Err(e),
            Err(_) => attempt(None),
        }
    })
}
