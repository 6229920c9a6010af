//! Clustered longitudinal data: CSV ingestion, per-cluster design matrices and
//! simulation from known parameters.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::ParameterSet;
use crate::formula::{parse_formula, FormulaError, ModelFormula};
use crate::numerics::{mvnormal_draw, normal_draw, Matrix, NumericsError, RandomStream, SpdMatrix};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("column `{0}` not found in the header")]
    MissingColumn(String),

    #[error("no usable rows after dropping {dropped} rows with missing values")]
    NoUsableRows { dropped: usize },

    #[error("cluster `{0}` has no usable rows")]
    EmptyCluster(String),

    #[error("at least 2 clusters are required, found {0}")]
    TooFewClusters(usize),

    #[error("invalid dataset: {0}")]
    Invalid(String),

    #[error("invalid simulation design: {0}")]
    InvalidDesign(String),

    #[error(transparent)]
    Formula(#[from] FormulaError),

    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Observations of one cluster: `y`, the fixed design `X` (J × p), the random
/// design `Z` (J × q) and the raw covariate values they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterBlock {
    pub id: String,
    pub y: Vec<f64>,
    pub x: Matrix,
    pub z: Matrix,
    /// J × m raw covariate values, columns as in [`LongitudinalDataset::covariate_names`].
    pub covariates: Matrix,
    /// 0-based data-row indices in the source file.
    pub row_ids: Vec<usize>,
}

impl ClusterBlock {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    pub formula: ModelFormula,
    pub clusters: Vec<ClusterBlock>,
    pub fixed_names: Vec<String>,
    pub random_names: Vec<String>,
    pub covariate_names: Vec<String>,
    /// Rows dropped at ingestion because a referenced value was missing.
    pub dropped_rows: usize,
}

/// One observation before grouping.
#[derive(Debug, Clone)]
pub struct Record {
    pub cluster: String,
    pub response: f64,
    /// Values in the order of `formula.covariates()`.
    pub covariates: Vec<f64>,
    pub row_id: usize,
}

fn design_row(formula: &ModelFormula, names: &[String], values: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let lookup = |v: &str| values[names.iter().position(|n| n == v).expect("covariate indexed")];
    let x = formula
        .fixed_terms
        .iter()
        .map(|t| t.variables().iter().map(|v| lookup(v)).product::<f64>())
        .collect();
    let mut z = Vec::with_capacity(formula.random_slopes.len() + 1);
    if formula.random_intercept {
        z.push(1.0);
    }
    z.extend(formula.random_slopes.iter().map(|s| lookup(s)));
    (x, z)
}

impl LongitudinalDataset {
    /// Groups records by cluster label (first-appearance order) and builds the
    /// design matrices for `formula`.
    pub fn from_records(
        formula: ModelFormula,
        records: Vec<Record>,
        dropped_rows: usize,
    ) -> Result<Self, DataError> {
        let covariate_names = formula.covariates();
        let m = covariate_names.len();
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<String, Vec<Record>> = HashMap::new();
        for r in records {
            if r.covariates.len() != m {
                return Err(DataError::Invalid(format!(
                    "record {} has {} covariates, expected {}",
                    r.row_id,
                    r.covariates.len(),
                    m
                )));
            }
            if !r.response.is_finite() || r.covariates.iter().any(|v| !v.is_finite()) {
                return Err(DataError::Invalid(format!("record {} has non-finite values", r.row_id)));
            }
            if !groups.contains_key(&r.cluster) {
                order.push(r.cluster.clone());
            }
            groups.entry(r.cluster.clone()).or_default().push(r);
        }
        if order.is_empty() {
            return Err(DataError::NoUsableRows { dropped: dropped_rows });
        }
        if order.len() < 2 {
            return Err(DataError::TooFewClusters(order.len()));
        }
        let p = formula.fixed_terms.len();
        let q = formula.random_names().len();
        let mut clusters = Vec::with_capacity(order.len());
        for id in order {
            let rows = groups.remove(&id).expect("grouped");
            let j = rows.len();
            let mut xs = Vec::with_capacity(j * p);
            let mut zs = Vec::with_capacity(j * q);
            let mut cs = Vec::with_capacity(j * m);
            let mut y = Vec::with_capacity(j);
            let mut row_ids = Vec::with_capacity(j);
            for r in rows {
                let (x, z) = design_row(&formula, &covariate_names, &r.covariates);
                xs.extend(x);
                zs.extend(z);
                cs.extend_from_slice(&r.covariates);
                y.push(r.response);
                row_ids.push(r.row_id);
            }
            clusters.push(ClusterBlock {
                id,
                y,
                x: Matrix::from_row_slice(j, p, &xs)?,
                z: Matrix::from_row_slice(j, q, &zs)?,
                covariates: Matrix::from_row_slice(j, m, &cs)?,
                row_ids,
            });
        }
        Ok(Self {
            fixed_names: formula.fixed_names(),
            random_names: formula.random_names(),
            covariate_names,
            formula,
            clusters,
            dropped_rows,
        })
    }

    /// Number of clusters `n`.
    pub fn n(&self) -> usize {
        self.clusters.len()
    }

    /// Total number of observations `N = Σ Jᵢ`.
    pub fn total_rows(&self) -> usize {
        self.clusters.iter().map(ClusterBlock::len).sum()
    }

    pub fn p(&self) -> usize {
        self.fixed_names.len()
    }

    pub fn q(&self) -> usize {
        self.random_names.len()
    }

    pub fn cluster_var(&self) -> &str {
        &self.formula.cluster
    }

    /// Row-stacked fixed design (N × p), clusters in dataset order.
    pub fn stacked_x(&self) -> Matrix {
        let p = self.p();
        let mut data = Vec::with_capacity(self.total_rows() * p);
        for c in &self.clusters {
            data.extend_from_slice(c.x.as_slice());
        }
        Matrix::from_row_slice(self.total_rows(), p, &data).expect("consistent blocks")
    }

    pub fn stacked_y(&self) -> Vec<f64> {
        self.clusters.iter().flat_map(|c| c.y.iter().copied()).collect()
    }

    /// Same design with new responses, one vector per cluster.
    pub fn with_responses(&self, ys: Vec<Vec<f64>>) -> Result<Self, DataError> {
        if ys.len() != self.n() {
            return Err(DataError::Invalid(format!(
                "{} response vectors for {} clusters",
                ys.len(),
                self.n()
            )));
        }
        let mut out = self.clone();
        for (c, y) in out.clusters.iter_mut().zip(ys) {
            if y.len() != c.len() {
                return Err(DataError::Invalid(format!(
                    "cluster `{}`: {} responses for {} rows",
                    c.id,
                    y.len(),
                    c.len()
                )));
            }
            c.y = y;
        }
        Ok(out)
    }

    /// Copy without cluster `index` (used by the jackknife).
    pub fn without_cluster(&self, index: usize) -> Self {
        let mut out = self.clone();
        out.clusters.remove(index);
        out
    }

    /// Copy with clusters reordered by `perm` (a permutation of `0..n`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        out.clusters = perm.iter().map(|&i| self.clusters[i].clone()).collect();
        out
    }
}

fn is_missing(field: &str) -> bool {
    let t = field.trim();
    t.is_empty() || t == "NA"
}

/// Reads a long-format CSV. Rows with a missing or non-numeric value in any
/// referenced column are dropped and counted.
pub fn read_csv(path: impl AsRef<Path>, formula: &ModelFormula) -> Result<LongitudinalDataset, DataError> {
    let file = std::fs::File::open(path)?;
    read_csv_from(file, formula)
}

pub fn read_csv_from<R: Read>(reader: R, formula: &ModelFormula) -> Result<LongitudinalDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let response_col = col(&formula.response)?;
    let cluster_col = col(&formula.cluster)?;
    let covariate_cols =
        formula.covariates().iter().map(|c| col(c)).collect::<Result<Vec<_>, _>>()?;

    let mut records = Vec::new();
    let mut dropped = 0usize;
    let mut labels_seen: Vec<String> = Vec::new();
    let mut labels_kept: std::collections::HashSet<String> = Default::default();
    for (row_id, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let label = field(cluster_col);
        if is_missing(label) {
            dropped += 1;
            continue;
        }
        if !labels_seen.iter().any(|l| l == label) {
            labels_seen.push(label.to_string());
        }
        let parse = |i: usize| -> Option<f64> {
            let s = field(i);
            if is_missing(s) {
                return None;
            }
            s.parse::<f64>().ok().filter(|v| v.is_finite())
        };
        let response = parse(response_col);
        let covs: Option<Vec<f64>> = covariate_cols.iter().map(|&i| parse(i)).collect();
        match (response, covs) {
            (Some(response), Some(covariates)) => {
                labels_kept.insert(label.to_string());
                records.push(Record { cluster: label.to_string(), response, covariates, row_id });
            }
            _ => dropped += 1,
        }
    }
    if records.is_empty() {
        return Err(DataError::NoUsableRows { dropped });
    }
    if let Some(empty) = labels_seen.iter().find(|l| !labels_kept.contains(*l)) {
        return Err(DataError::EmptyCluster(empty.clone()));
    }
    LongitudinalDataset::from_records(formula.clone(), records, dropped)
}

/// Writes `obs`, the cluster column, the covariates and the response in long format.
pub fn write_csv(dataset: &LongitudinalDataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let file = std::fs::File::create(path)?;
    write_csv_to(dataset, file)
}

pub fn write_csv_to<W: Write>(dataset: &LongitudinalDataset, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["obs".to_string(), dataset.formula.cluster.clone()];
    header.extend(dataset.covariate_names.iter().cloned());
    header.push(dataset.formula.response.clone());
    w.write_record(&header)?;
    let mut obs = 0usize;
    for c in &dataset.clusters {
        for j in 0..c.len() {
            obs += 1;
            let mut row = vec![obs.to_string(), c.id.clone()];
            row.extend(c.covariates.row(j).iter().map(|v| v.to_string()));
            row.push(c.y[j].to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Formula used for simulated two-arm longitudinal data.
pub const SIMULATION_FORMULA: &str = "pos ~ treat * time + (time | id)";

/// Two-arm design with random intercepts and slopes on `time`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationDesign {
    pub n: usize,
    pub times: Vec<f64>,
    /// Per-cluster treatment label, 0 or 1.
    pub group_assignment: Vec<u8>,
    pub truth: ParameterSet,
    /// Number of treated clusters to relabel as control after generation.
    pub label_swaps: usize,
}

/// JSON form of a [`SimulationDesign`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationDesignSpec {
    pub n: usize,
    pub times: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treat_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treat: Option<Vec<u8>>,
    pub gamma: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    pub sigma_e2: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub label_swaps: usize,
}

impl SimulationDesignSpec {
    pub fn resolve(&self) -> Result<SimulationDesign, DataError> {
        let group_assignment = match (&self.treat, self.treat_fraction) {
            (Some(_), Some(_)) => {
                return Err(DataError::InvalidDesign("give either `treat` or `treat_fraction`".into()))
            }
            (Some(t), None) => t.clone(),
            (None, Some(f)) => {
                if !(0.0..=1.0).contains(&f) {
                    return Err(DataError::InvalidDesign(format!("treat_fraction {f} outside [0, 1]")));
                }
                let treated = (self.n as f64 * f).round() as usize;
                (0..self.n).map(|i| u8::from(i >= self.n - treated)).collect()
            }
            (None, None) => vec![0; self.n],
        };
        if self.sigma_e2 < 0.0 || !self.sigma_e2.is_finite() {
            return Err(DataError::InvalidDesign(format!("sigma_e2 = {}", self.sigma_e2)));
        }
        let design = SimulationDesign {
            n: self.n,
            times: self.times.clone(),
            group_assignment,
            truth: ParameterSet {
                gamma: self.gamma.clone(),
                sigma: Matrix::from_rows(&self.sigma)?,
                sigma_e: self.sigma_e2.sqrt(),
            },
            label_swaps: self.label_swaps,
        };
        design.validate()?;
        Ok(design)
    }

    /// The simulated-trial design: 60 clusters, 7 visits, truth as in the
    /// classic positive-mood example.
    pub fn medsim() -> Self {
        Self {
            n: 60,
            times: vec![0.0, 3.0, 6.0, 9.0, 12.0, 15.0, 18.0],
            treat_fraction: Some(0.5),
            treat: None,
            gamma: vec![167.46, -3.11, -2.42, 4.00],
            sigma: vec![vec![2111.54, -121.63], vec![-121.63, 63.74]],
            sigma_e2: 1229.93,
            seed: 1,
            label_swaps: 0,
        }
    }
}

impl SimulationDesign {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n < 2 {
            return Err(DataError::InvalidDesign(format!("n = {} (need at least 2)", self.n)));
        }
        if self.times.is_empty() || self.times.iter().any(|t| !t.is_finite()) {
            return Err(DataError::InvalidDesign("times must be a nonempty list of finite values".into()));
        }
        if self.group_assignment.len() != self.n {
            return Err(DataError::InvalidDesign(format!(
                "{} group labels for n = {}",
                self.group_assignment.len(),
                self.n
            )));
        }
        if self.group_assignment.iter().any(|&g| g > 1) {
            return Err(DataError::InvalidDesign("group labels must be 0 or 1".into()));
        }
        if self.truth.gamma.len() != 4 {
            return Err(DataError::InvalidDesign("gamma must have 4 entries".into()));
        }
        if self.truth.sigma.rows() != 2 || self.truth.sigma.cols() != 2 {
            return Err(DataError::InvalidDesign("sigma must be 2x2".into()));
        }
        let treated = self.group_assignment.iter().filter(|&&g| g == 1).count();
        if self.label_swaps > treated {
            return Err(DataError::InvalidDesign(format!(
                "{} label swaps but only {treated} treated clusters",
                self.label_swaps
            )));
        }
        Ok(())
    }
}

/// Simulated dataset plus the indices of clusters whose label was swapped.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: LongitudinalDataset,
    pub swapped_clusters: Vec<usize>,
}

fn ols_slope(t: &[f64], y: &[f64]) -> f64 {
    let n = t.len() as f64;
    let tm = t.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let sxy: f64 = t.iter().zip(y).map(|(a, b)| (a - tm) * (b - ym)).sum();
    let sxx: f64 = t.iter().map(|a| (a - tm) * (a - tm)).sum();
    if sxx > 0.0 {
        sxy / sxx
    } else {
        0.0
    }
}

/// Draws `bᵢ ~ N(0, Σ)`, `εᵢ ~ N(0, σ²ε I)` and sets `yᵢ = Xᵢγ + Zᵢbᵢ + εᵢ`
/// with `X = [1, treat, time, treat·time]` and `Z = [1, time]`.
///
/// With `label_swaps = m > 0`, the `m` treated clusters with the steepest
/// observed slope are relabelled as control after their responses were drawn.
pub fn simulate(design: &SimulationDesign, rng: &mut RandomStream) -> Result<Simulation, DataError> {
    design.validate()?;
    let truth = &design.truth;
    if !(truth.sigma_e >= 0.0) {
        return Err(DataError::InvalidDesign(format!("sigma_e = {}", truth.sigma_e)));
    }
    let sigma = SpdMatrix::new(truth.sigma.clone())?;
    let formula = parse_formula(SIMULATION_FORMULA)?;
    let g = &truth.gamma;
    let mut labels = design.group_assignment.clone();
    let mut responses: Vec<Vec<f64>> = Vec::with_capacity(design.n);
    for &treat in &labels {
        let b = mvnormal_draw(rng, &[0.0, 0.0], &sigma)?;
        let tr = f64::from(treat);
        let mut y = Vec::with_capacity(design.times.len());
        for &t in &design.times {
            let mean = g[0] + g[1] * tr + g[2] * t + g[3] * tr * t + b[0] + b[1] * t;
            y.push(normal_draw(rng, mean, truth.sigma_e)?);
        }
        responses.push(y);
    }
    let mut swapped = Vec::new();
    if design.label_swaps > 0 {
        let mut treated: Vec<(usize, f64)> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == 1)
            .map(|(i, _)| (i, ols_slope(&design.times, &responses[i])))
            .collect();
        treated.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(i, _) in treated.iter().take(design.label_swaps) {
            labels[i] = 0;
            swapped.push(i);
        }
        swapped.sort_unstable();
    }
    // formula.covariates() is [treat, time].
    let mut records = Vec::with_capacity(design.n * design.times.len());
    for (i, y) in responses.into_iter().enumerate() {
        for (j, (&t, yj)) in design.times.iter().zip(y).enumerate() {
            records.push(Record {
                cluster: (i + 1).to_string(),
                response: yj,
                covariates: vec![f64::from(labels[i]), t],
                row_id: i * design.times.len() + j,
            });
        }
    }
    let dataset = LongitudinalDataset::from_records(formula, records, 0)?;
    Ok(Simulation { dataset, swapped_clusters: swapped })
}

pub fn simulate_dataset(
    design: &SimulationDesign,
    rng: &mut RandomStream,
) -> Result<LongitudinalDataset, DataError> {
    Ok(simulate(design, rng)?.dataset)
}
