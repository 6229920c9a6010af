//! Text and JSON renderings of fits.

use std::fmt::Write as _;

use serde::Serialize;

use lmmci::data::LongitudinalDataset;
use lmmci::estimation::{FitResult, ParamKind};
use lmmci::intervals::{format_sig, CiTable};
use lmmci::numerics::Matrix;

#[derive(Debug, Serialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Serialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Serialize)]
pub struct ClusterWeight {
    pub cluster: String,
    pub weight: f64,
}

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub method: String,
    pub formula: String,
    pub n_clusters: usize,
    pub n_obs: usize,
    pub dropped_rows: usize,
    pub converged: bool,
    pub boundary: bool,
    pub n_iter: usize,
    pub n_eval: usize,
    pub loglik: f64,
    pub deviance: f64,
    pub reml_criterion: Option<f64>,
    pub coefficients: Vec<Coefficient>,
    pub parameters: Vec<NamedValue>,
    pub sigma: Matrix,
    pub sigma_e: f64,
    /// Dataset order.
    pub weights: Option<Vec<ClusterWeight>>,
}

impl FitReport {
    pub fn new(fit: &FitResult, data: &LongitudinalDataset) -> Self {
        let reported = fit.reported();
        Self {
            method: fit.method.to_string(),
            formula: data.formula.render(),
            n_clusters: data.n(),
            n_obs: data.total_rows(),
            dropped_rows: data.dropped_rows,
            converged: fit.converged,
            boundary: fit.boundary,
            n_iter: fit.n_iter,
            n_eval: fit.n_eval,
            loglik: fit.loglik,
            deviance: fit.deviance,
            reml_criterion: fit.reml_criterion,
            coefficients: fit
                .names
                .fixed
                .iter()
                .zip(fit.params.gamma.iter().zip(&fit.se_gamma))
                .map(|(n, (&e, &s))| Coefficient { name: n.clone(), estimate: e, se: s })
                .collect(),
            parameters: reported
                .names
                .iter()
                .zip(&reported.values)
                .map(|(n, &v)| NamedValue { name: n.clone(), value: v })
                .collect(),
            sigma: fit.params.sigma.clone(),
            sigma_e: fit.params.sigma_e,
            weights: fit.weights.as_ref().map(|w| {
                data.clusters
                    .iter()
                    .zip(w)
                    .map(|(c, &w)| ClusterWeight { cluster: c.id.clone(), weight: w })
                    .collect()
            }),
        }
    }
}

fn g(v: f64) -> String {
    format_sig(v, 6)
}

fn pad_table(rows: &[Vec<String>]) -> String {
    let ncol = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> =
        (0..ncol).map(|j| rows.iter().filter_map(|r| r.get(j)).map(|c| c.chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in rows {
        let mut line = String::new();
        for (j, c) in r.iter().enumerate() {
            if j == 0 {
                let _ = write!(line, "{:<w$}", c, w = widths[0]);
            } else {
                let _ = write!(line, "  {:>w$}", c, w = widths[j]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

pub fn fit_text(fit: &FitResult, data: &LongitudinalDataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Linear mixed model fit by {}", fit.method);
    let _ = writeln!(out, "Formula: {}", data.formula.render());
    let _ = writeln!(
        out,
        "Clusters: {}  Observations: {}  Dropped rows: {}",
        data.n(),
        data.total_rows(),
        data.dropped_rows
    );
    out.push_str("\nFixed effects:\n");
    let mut rows = vec![vec![String::new(), "Estimate".to_string(), "Std. Error".to_string()]];
    for ((n, &e), &s) in fit.names.fixed.iter().zip(&fit.params.gamma).zip(&fit.se_gamma) {
        rows.push(vec![n.clone(), g(e), g(s)]);
    }
    out.push_str(&pad_table(&rows));
    out.push_str("\nVariance components:\n");
    let reported = fit.reported();
    let rows: Vec<Vec<String>> = reported
        .names
        .iter()
        .zip(&reported.kinds)
        .zip(&reported.values)
        .filter(|((_, k), _)| **k != ParamKind::Fixed)
        .map(|((n, _), &v)| vec![n.clone(), g(v)])
        .collect();
    out.push_str(&pad_table(&rows));
    let _ = writeln!(out, "\nLog-likelihood: {}  Deviance: {}", g(fit.loglik), g(fit.deviance));
    if let Some(r) = fit.reml_criterion {
        let _ = writeln!(out, "REML criterion: {}", g(r));
    }
    let _ = writeln!(
        out,
        "Converged: {}  Boundary: {}  Iterations: {}",
        if fit.converged { "yes" } else { "no" },
        if fit.boundary { "yes" } else { "no" },
        fit.n_iter
    );
    if let Some(w) = &fit.weights {
        out.push_str("\nRobustness weights (ascending):\n");
        let mut pairs: Vec<(&str, f64)> = data.clusters.iter().map(|c| c.id.as_str()).zip(w.iter().copied()).collect();
        pairs.sort_by(|a, b| a.1.total_cmp(&b.1));
        let mut rows = vec![vec![data.cluster_var().to_string(), "weight".to_string()]];
        rows.extend(pairs.iter().map(|(id, w)| vec![id.to_string(), g(*w)]));
        out.push_str(&pad_table(&rows));
    }
    out
}

pub fn fit_csv(fit: &FitResult) -> String {
    let reported = fit.reported();
    let mut out = String::from("parameter,estimate,se\n");
    for (j, (n, v)) in reported.names.iter().zip(&reported.values).enumerate() {
        let se = fit.se_gamma.get(j).map(|s| format!("{s:?}")).unwrap_or_default();
        let _ = writeln!(out, "{},{v:?},{se}", csv_name(n));
    }
    out
}

fn csv_name(n: &str) -> String {
    if n.contains([',', '"']) {
        format!("\"{}\"", n.replace('"', "\"\""))
    } else {
        n.to_string()
    }
}

/// Side-by-side estimates in the shape of a classical-versus-robust table.
pub fn compare_text(fits: &[&FitResult]) -> String {
    let mut rows = vec![std::iter::once(String::new()).chain(fits.iter().map(|f| f.method.to_string())).collect()];
    rows.push(vec!["Coefficients".to_string()]);
    let first = fits[0];
    for (j, n) in first.names.fixed.iter().enumerate() {
        let mut r = vec![n.clone()];
        r.extend(fits.iter().map(|f| format!("{} ({})", g(f.params.gamma[j]), g(f.se_gamma[j]))));
        rows.push(r);
    }
    let reported: Vec<_> = fits.iter().map(|f| f.reported()).collect();
    let sections = [
        ("Variance components (SD)", ParamKind::StdDev),
        ("Correlations", ParamKind::Correlation),
        ("Residual", ParamKind::ResidualStdDev),
    ];
    for (title, kind) in sections {
        rows.push(vec![title.to_string()]);
        for (j, n) in reported[0].names.iter().enumerate() {
            if reported[0].kinds[j] == kind {
                let mut r = vec![n.clone()];
                r.extend(reported.iter().map(|p| g(p.values[j])));
                rows.push(r);
            }
        }
    }
    let mut r = vec!["Deviance".to_string()];
    r.extend(fits.iter().map(|f| g(f.deviance)));
    rows.push(r);
    pad_table(&rows)
}

/// Interval tables of several fits side by side.
pub fn compare_ci_text(labels: &[String], tables: &[CiTable]) -> String {
    let mut header = vec![String::new()];
    for (l, t) in labels.iter().zip(tables) {
        header.push(format!("{l} {}", t.labels[0]));
        header.push(format!("{l} {}", t.labels[1]));
    }
    let mut rows = vec![header];
    for (i, row) in tables[0].rows.iter().enumerate() {
        let mut r = vec![row.name.clone()];
        for t in tables {
            r.push(g(t.rows[i].lower));
            r.push(g(t.rows[i].upper));
        }
        rows.push(r);
    }
    pad_table(&rows)
}
