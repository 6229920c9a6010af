//! Wald, percentile and BCa confidence intervals and the `confint` pipeline.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bootstrap::{jackknife_run, run_bootstrap, BootScheme, BootstrapError, BootstrapRun, JackknifeRun};
use crate::data::LongitudinalDataset;
use crate::estimation::{reported_values, Estimator, FitMethod, FitResult, ParamKind};
use crate::numerics::{norm_cdf, norm_quantile, quantile_sorted, NumericsError};
use crate::robust::RobustConfig;

#[derive(Debug, Error)]
pub enum IntervalError {
    #[error("invalid options: {0}")]
    InvalidOptions(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("parameter index {index} is outside 1..={count}")]
    IndexOutOfRange { index: usize, count: usize },

    #[error("Wald intervals are available only for fixed effects; `{0}` is a variance component")]
    WaldVarianceComponent(String),

    #[error("method BCa needs the cluster identifier (--cluster-id)")]
    MissingClusterId,

    #[error("cluster identifier `{given}` does not match the model's cluster variable `{expected}`")]
    ClusterIdMismatch { given: String, expected: String },

    #[error(transparent)]
    Bootstrap(#[from] BootstrapError),

    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CiMethod {
    Wald,
    #[serde(rename = "boot")]
    Boot,
    #[serde(rename = "BCa")]
    Bca,
}

impl std::fmt::Display for CiMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CiMethod::Wald => "Wald",
            CiMethod::Boot => "boot",
            CiMethod::Bca => "BCa",
        })
    }
}

impl std::str::FromStr for CiMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "wald" => Ok(CiMethod::Wald),
            "boot" | "percentile" => Ok(CiMethod::Boot),
            "bca" => Ok(CiMethod::Bca),
            other => Err(format!("unknown interval method `{other}` (expected wald, boot or bca)")),
        }
    }
}

/// A parameter chosen by 1-based position or by reported name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamSelector {
    Index(usize),
    Name(String),
}

impl std::str::FromStr for ParamSelector {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        Ok(match t.parse::<usize>() {
            Ok(i) => ParamSelector::Index(i),
            Err(_) => ParamSelector::Name(t.to_string()),
        })
    }
}

/// Resolves selectors to 0-based positions in `names`, keeping request order.
pub fn resolve_params(selectors: &[ParamSelector], names: &[String]) -> Result<Vec<usize>, IntervalError> {
    selectors
        .iter()
        .map(|s| match s {
            ParamSelector::Index(i) if (1..=names.len()).contains(i) => Ok(i - 1),
            ParamSelector::Index(i) => Err(IntervalError::IndexOutOfRange { index: *i, count: names.len() }),
            ParamSelector::Name(n) => {
                let mut hits = names.iter().enumerate().filter(|(_, m)| *m == n).map(|(i, _)| i);
                match (hits.next(), hits.next()) {
                    (Some(i), None) => Ok(i),
                    _ => Err(IntervalError::UnknownParameter(n.clone())),
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CiOptions {
    pub method: CiMethod,
    pub boot_type: BootScheme,
    pub nsim: usize,
    pub level: f64,
    pub parm: Option<Vec<ParamSelector>>,
    pub cluster_id: Option<String>,
    pub seed: u64,
    pub threads: usize,
    /// Tuning of the jackknife refits when the original fit is robust.
    pub robust: RobustConfig,
}

impl Default for CiOptions {
    fn default() -> Self {
        Self {
            method: CiMethod::Boot,
            boot_type: BootScheme::Wild,
            nsim: 5000,
            level: 0.95,
            parm: None,
            cluster_id: None,
            seed: 1,
            threads: 1,
            robust: RobustConfig::default(),
        }
    }
}

impl CiOptions {
    pub fn validate(&self) -> Result<(), IntervalError> {
        check_level(self.level)?;
        if self.nsim == 0 {
            return Err(IntervalError::InvalidOptions("nsim must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(IntervalError::InvalidOptions("threads must be at least 1".into()));
        }
        if self.method == CiMethod::Bca && self.cluster_id.is_none() {
            return Err(IntervalError::MissingClusterId);
        }
        Ok(())
    }
}

fn check_level(level: f64) -> Result<(), IntervalError> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(IntervalError::InvalidOptions(format!("level {level} is outside (0, 1)")))
    }
}

/// Tail probabilities `(α/2, 1 − α/2)` for `α = 1 − level`.
pub fn tail_probabilities(level: f64) -> (f64, f64) {
    let alpha = 1.0 - level;
    (alpha / 2.0, 1.0 - alpha / 2.0)
}

/// Column labels such as `"2.5 %"` and `"97.5 %"`.
pub fn bound_labels(level: f64) -> [String; 2] {
    let (lo, hi) = tail_probabilities(level);
    [format!("{} %", format_sig(100.0 * lo, 3)), format!("{} %", format_sig(100.0 * hi, 3))]
}

/// Formats with `digits` significant digits, dropping trailing zeros.
pub fn format_sig(v: f64, digits: usize) -> String {
    if !v.is_finite() {
        return if v.is_nan() { "NaN".into() } else if v > 0.0 { "Inf".into() } else { "-Inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= digits as i32 {
        let m = trim_zeros(mantissa);
        return format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn sorted(samples: &[f64]) -> Vec<f64> {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Empirical `(α/2, 1 − α/2)` quantiles.
pub fn percentile_ci(samples: &[f64], level: f64) -> Result<(f64, f64), IntervalError> {
    check_level(level)?;
    let s = sorted(samples);
    let (lo, hi) = tail_probabilities(level);
    Ok((quantile_sorted(&s, lo)?, quantile_sorted(&s, hi)?))
}

/// Bias correction, acceleration and adjusted tail probabilities for one
/// parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcaComponents {
    pub z0: f64,
    pub a: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Share of bootstrap estimates strictly below the point estimate.
    pub proportion_below: f64,
    pub warning: Option<String>,
}

/// Jackknife acceleration `Σd³ / (6 (Σd²)^{3/2})` with `d = mean − θ₍ᵢ₎`;
/// zero when the rows are equal up to rounding.
pub fn acceleration(jack: &[f64]) -> f64 {
    let n = jack.len() as f64;
    if jack.is_empty() {
        return 0.0;
    }
    let mean = jack.iter().sum::<f64>() / n;
    let (s2, s3) = jack.iter().fold((0.0, 0.0), |(s2, s3), v| {
        let d = mean - v;
        (s2 + d * d, s3 + d * d * d)
    });
    let scale = jack.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let noise = 4.0 * f64::EPSILON * scale;
    if s2 <= n * noise * noise {
        return 0.0;
    }
    s3 / (6.0 * s2.powf(1.5))
}

fn adjusted_tail(z0: f64, a: f64, z: f64) -> Option<f64> {
    let denom = 1.0 - a * (z0 + z);
    let v = norm_cdf(z0 + (z0 + z) / denom);
    (denom > 0.0 && v.is_finite()).then_some(v.clamp(0.0, 1.0))
}

pub fn bca_components(
    samples: &[f64],
    point_estimate: f64,
    jack: &[f64],
    level: f64,
) -> Result<BcaComponents, IntervalError> {
    check_level(level)?;
    if samples.is_empty() {
        return Err(NumericsError::EmptySample.into());
    }
    if jack.len() < 3 {
        return Err(IntervalError::InvalidOptions(format!(
            "the acceleration needs at least 3 jackknife values, got {}",
            jack.len()
        )));
    }
    let b = samples.len() as f64;
    let below = samples.iter().filter(|&&v| v < point_estimate).count();
    let proportion_below = below as f64 / b;
    let mut warning = None;
    let pi = if below == 0 {
        warning = Some("no bootstrap estimate lies below the point estimate".to_string());
        1.0 / (2.0 * b)
    } else if below == samples.len() {
        warning = Some("every bootstrap estimate lies below the point estimate".to_string());
        1.0 - 1.0 / (2.0 * b)
    } else {
        proportion_below
    };
    let z0 = norm_quantile(pi);
    let a = acceleration(jack);
    let (lo, hi) = tail_probabilities(level);
    let (alpha1, alpha2) = if z0 == 0.0 && a == 0.0 {
        (lo, hi)
    } else {
        let a1 = adjusted_tail(z0, a, norm_quantile(lo));
        let a2 = adjusted_tail(z0, a, norm_quantile(hi));
        if a1.is_none() || a2.is_none() {
            warning = Some("acceleration too large for the requested level; tail clamped".to_string());
        }
        (a1.unwrap_or(0.0), a2.unwrap_or(1.0))
    };
    Ok(BcaComponents { z0, a, alpha1, alpha2, proportion_below, warning })
}

/// Empirical quantiles at the adjusted tail probabilities.
pub fn bca_ci(samples: &[f64], components: &BcaComponents) -> Result<(f64, f64), IntervalError> {
    let s = sorted(samples);
    Ok((quantile_sorted(&s, components.alpha1)?, quantile_sorted(&s, components.alpha2)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiRow {
    pub name: String,
    pub kind: ParamKind,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedBca {
    pub name: String,
    #[serde(flatten)]
    pub components: BcaComponents,
}

/// Everything computed along the way, for every parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullResults {
    pub percentile: Vec<CiRow>,
    pub bootstrap_estimates: BootstrapRun,
    pub bca: Option<Vec<NamedBca>>,
    pub jackknife: Option<JackknifeRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiTable {
    pub method: CiMethod,
    pub boot_type: Option<BootScheme>,
    pub level: f64,
    pub labels: [String; 2],
    pub rows: Vec<CiRow>,
    pub warnings: Vec<String>,
    pub full_results: Option<FullResults>,
}

impl CiTable {
    pub fn row(&self, name: &str) -> Option<&CiRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Fixed-width table: name column then the two bound columns.
    pub fn render_text(&self) -> String {
        let cells: Vec<[String; 3]> = self
            .rows
            .iter()
            .map(|r| [r.name.clone(), format_sig(r.lower, 6), format_sig(r.upper, 6)])
            .collect();
        let w0 = cells.iter().map(|c| c[0].chars().count()).max().unwrap_or(0);
        let w1 = cells.iter().map(|c| c[1].len()).chain([self.labels[0].len()]).max().unwrap_or(0);
        let w2 = cells.iter().map(|c| c[2].len()).chain([self.labels[1].len()]).max().unwrap_or(0);
        let mut out = String::new();
        let _ = writeln!(out, "{:w0$}  {:>w1$}  {:>w2$}", "", self.labels[0], self.labels[1]);
        for c in &cells {
            let _ = writeln!(out, "{:w0$}  {:>w1$}  {:>w2$}", c[0], c[1], c[2]);
        }
        out
    }

    pub fn render_csv(&self) -> String {
        let mut out = format!("parameter,{},{}\n", self.labels[0], self.labels[1]);
        for r in &self.rows {
            let name = if r.name.contains([',', '"']) {
                format!("\"{}\"", r.name.replace('"', "\"\""))
            } else {
                r.name.clone()
            };
            let _ = writeln!(out, "{name},{:?},{:?}", r.lower, r.upper);
        }
        out
    }
}

fn clamp_bounds(kind: ParamKind, lower: f64, upper: f64) -> (f64, f64) {
    match kind {
        ParamKind::Correlation => (lower.clamp(-1.0, 1.0), upper.clamp(-1.0, 1.0)),
        ParamKind::StdDev | ParamKind::ResidualStdDev => (lower.max(0.0), upper.max(0.0)),
        ParamKind::Fixed => (lower, upper),
    }
}

/// `γ̂ⱼ ± z_{1−α/2} · se_j` for every fixed effect.
pub fn wald_ci(fit: &FitResult, level: f64) -> Result<CiTable, IntervalError> {
    check_level(level)?;
    let (_, hi) = tail_probabilities(level);
    let z = norm_quantile(hi);
    let rows = fit
        .names
        .fixed
        .iter()
        .zip(fit.params.gamma.iter().zip(&fit.se_gamma))
        .map(|(name, (&est, &se))| CiRow {
            name: name.clone(),
            kind: ParamKind::Fixed,
            estimate: est,
            lower: est - z * se,
            upper: est + z * se,
        })
        .collect();
    Ok(CiTable {
        method: CiMethod::Wald,
        boot_type: None,
        level,
        labels: bound_labels(level),
        rows,
        warnings: Vec::new(),
        full_results: None,
    })
}

fn select(rows: &[CiRow], picks: &Option<Vec<usize>>) -> Vec<CiRow> {
    match picks {
        Some(p) => p.iter().map(|&i| rows[i].clone()).collect(),
        None => rows.to_vec(),
    }
}

/// Full pipeline: Wald, percentile bootstrap or BCa bootstrap intervals.
pub fn confint(fit: &FitResult, data: &LongitudinalDataset, options: &CiOptions) -> Result<CiTable, IntervalError> {
    options.validate()?;
    let names = fit.names.names();
    let kinds = fit.names.kinds();
    let picks = options.parm.as_ref().map(|s| resolve_params(s, &names)).transpose()?;
    if options.method == CiMethod::Wald {
        if let Some(p) = &picks {
            if let Some(&i) = p.iter().find(|&&i| kinds[i] != ParamKind::Fixed) {
                return Err(IntervalError::WaldVarianceComponent(names[i].clone()));
            }
        }
        let mut table = wald_ci(fit, options.level)?;
        table.rows = select(&table.rows, &picks);
        return Ok(table);
    }
    if options.method == CiMethod::Bca {
        let given = options.cluster_id.as_deref().ok_or(IntervalError::MissingClusterId)?;
        if given != data.cluster_var() {
            return Err(IntervalError::ClusterIdMismatch {
                given: given.to_string(),
                expected: data.cluster_var().to_string(),
            });
        }
    }
    let run = run_bootstrap(fit, data, options.nsim, options.boot_type, options.seed, options.threads)?;
    let point = reported_values(&fit.params);
    let mut warnings = Vec::new();
    if run.n_failed > 0 {
        warnings.push(format!("{} of {} bootstrap refits failed and were dropped", run.n_failed, run.requested_b));
    }
    let columns: Vec<Vec<f64>> = (0..names.len()).map(|j| run.column(j)).collect();
    let mut percentile = Vec::with_capacity(names.len());
    for (j, col) in columns.iter().enumerate() {
        let (lo, hi) = percentile_ci(col, options.level)?;
        let (lower, upper) = clamp_bounds(kinds[j], lo, hi);
        percentile.push(CiRow { name: names[j].clone(), kind: kinds[j], estimate: point[j], lower, upper });
    }
    let (rows, bca, jackknife) = if options.method == CiMethod::Bca {
        let estimator = match fit.method {
            FitMethod::Robust => Estimator::Robust(options.robust.clone()),
            m => Estimator::from(m),
        };
        let jack = jackknife_run(data, &estimator, Some(fit.theta.clone()), options.threads)?;
        let mut rows = Vec::with_capacity(names.len());
        let mut comps = Vec::with_capacity(names.len());
        for (j, col) in columns.iter().enumerate() {
            let c = bca_components(col, point[j], &jack.column(j), options.level)?;
            if let Some(w) = &c.warning {
                warnings.push(format!("{}: {w}", names[j]));
            }
            let (lo, hi) = bca_ci(col, &c)?;
            let (lower, upper) = clamp_bounds(kinds[j], lo, hi);
            rows.push(CiRow { name: names[j].clone(), kind: kinds[j], estimate: point[j], lower, upper });
            comps.push(NamedBca { name: names[j].clone(), components: c });
        }
        (rows, Some(comps), Some(jack))
    } else {
        (percentile.clone(), None, None)
    };
    Ok(CiTable {
        method: options.method,
        boot_type: Some(options.boot_type),
        level: options.level,
        labels: bound_labels(options.level),
        rows: select(&rows, &picks),
        warnings,
        full_results: Some(FullResults { percentile, bootstrap_estimates: run, bca, jackknife }),
    })
}
