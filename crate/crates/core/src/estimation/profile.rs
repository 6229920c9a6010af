//! Profiled deviance on per-cluster cross-products.
//!
//! With `Σ = σ² Λ Λᵀ` the marginal covariance is `Vᵢ = σ² Aᵢ`,
//! `Aᵢ = I + Zᵢ Λ Λᵀ Zᵢᵀ`. The Woodbury identity reduces every `Aᵢ` solve to
//! the q × q matrix `Mᵢ = I + Λᵀ ZᵢᵀZᵢ Λ`, with `det Aᵢ = det Mᵢ`. γ is
//! profiled by GLS and σ² in closed form, leaving a function of `θ` (the free
//! entries of Λ) only.
//!
//! Responses are stored relative to the OLS fit, so the quadratic forms stay
//! on the scale of the residuals.

use super::EstimationError;
use crate::data::LongitudinalDataset;
use crate::numerics::{cholesky, Matrix};

#[derive(Debug, Clone)]
struct ClusterCross {
    j: f64,
    ztz: Vec<f64>,
    ztx: Vec<f64>,
    zty: Vec<f64>,
    xtx: Vec<f64>,
    xty: Vec<f64>,
    yty: f64,
}

/// Which objective the optimiser sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    Ml,
    Reml,
}

#[derive(Debug, Clone)]
pub struct ProfiledModel {
    p: usize,
    q: usize,
    n_obs: usize,
    clusters: Vec<ClusterCross>,
    gamma_ols: Vec<f64>,
    rss_ols: f64,
    sum_y2: f64,
    weights: Option<Vec<f64>>,
}

/// Quantities at one value of θ.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub objective: f64,
    pub gamma: Vec<f64>,
    pub sigma2: f64,
    /// `Σ wᵢ Xᵢᵀ Aᵢ⁻¹ Xᵢ` (not scaled by σ²).
    pub xtaix: Matrix,
    pub logdet_a: f64,
    pub quad: f64,
}

/// Number of free entries of a q × q lower triangle.
pub fn theta_len(q: usize) -> usize {
    q * (q + 1) / 2
}

/// Positions of the diagonal entries of Λ in θ (column-major lower triangle).
pub fn diagonal_positions(q: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(q);
    let mut k = 0;
    for col in 0..q {
        out.push(k);
        k += q - col;
    }
    out
}

/// Λ from θ (column-major lower triangle); diagonal entries enter as `|θ|`.
pub fn lambda_from_theta(theta: &[f64], q: usize) -> Matrix {
    let mut l = Matrix::zeros(q, q);
    let mut k = 0;
    for col in 0..q {
        for row in col..q {
            l[(row, col)] = if row == col { theta[k].abs() } else { theta[k] };
            k += 1;
        }
    }
    l
}

/// θ from a lower-triangular Λ.
pub fn theta_from_lambda(l: &Matrix) -> Vec<f64> {
    let q = l.rows();
    let mut theta = Vec::with_capacity(theta_len(q));
    for col in 0..q {
        for row in col..q {
            theta.push(l[(row, col)]);
        }
    }
    theta
}

impl ProfiledModel {
    pub fn new(data: &LongitudinalDataset, weights: Option<Vec<f64>>) -> Result<Self, EstimationError> {
        let p = data.p();
        let q = data.q();
        if let Some(w) = &weights {
            if w.len() != data.n() {
                return Err(EstimationError::DimensionMismatch(format!(
                    "{} weights for {} clusters",
                    w.len(),
                    data.n()
                )));
            }
            if w.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(EstimationError::InvalidParameters("weights must lie in [0, 1]".into()));
            }
        }
        let x = data.stacked_x();
        let y = data.stacked_y();
        let xtx = x.gram();
        let chol = cholesky(&xtx).map_err(|_| EstimationError::RankDeficient)?;
        if chol.is_semidefinite() {
            return Err(EstimationError::RankDeficient);
        }
        let gamma_ols = chol.solve(&x.t_mul_vec(&y)?)?;
        let mut rss_ols = 0.0;
        let mut clusters = Vec::with_capacity(data.n());
        for c in &data.clusters {
            let fitted = c.x.mul_vec(&gamma_ols)?;
            let r: Vec<f64> = c.y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
            let rr: f64 = r.iter().map(|v| v * v).sum();
            rss_ols += rr;
            clusters.push(ClusterCross {
                j: c.len() as f64,
                ztz: c.z.gram().as_slice().to_vec(),
                ztx: c.z.t_matmul(&c.x)?.as_slice().to_vec(),
                zty: c.z.t_mul_vec(&r)?,
                xtx: c.x.gram().as_slice().to_vec(),
                xty: c.x.t_mul_vec(&r)?,
                yty: rr,
            });
        }
        Ok(Self {
            p,
            q,
            n_obs: data.total_rows(),
            clusters,
            gamma_ols,
            rss_ols,
            sum_y2: y.iter().map(|v| v * v).sum(),
            weights,
        })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn gamma_ols(&self) -> &[f64] {
        &self.gamma_ols
    }

    /// True when the fixed effects alone reproduce the response.
    pub fn is_degenerate(&self) -> bool {
        self.rss_ols <= 1e-20 * (self.sum_y2 + 1.0)
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    /// Accumulates `Σ wᵢ XᵢᵀAᵢ⁻¹Xᵢ`, `Σ wᵢ XᵢᵀAᵢ⁻¹rᵢ`, `Σ wᵢ rᵢᵀAᵢ⁻¹rᵢ`,
    /// `Σ wᵢ log det Aᵢ` and `Σ wᵢ Jᵢ` for the given Λ.
    fn accumulate(&self, lambda: &Matrix, weighted: bool) -> (Vec<f64>, Vec<f64>, f64, f64, f64) {
        let (p, q) = (self.p, self.q);
        let mut xax = vec![0.0; p * p];
        let mut xay = vec![0.0; p];
        let mut yay = 0.0;
        let mut logdet = 0.0;
        let mut nw = 0.0;
        let mut lz = vec![0.0; q * q];
        let mut m = vec![0.0; q * q];
        let mut r = vec![0.0; q * q];
        let mut a = vec![0.0; q * p];
        let mut c = vec![0.0; q];
        let l = lambda.as_slice();
        for (i, cl) in self.clusters.iter().enumerate() {
            let w = if weighted { self.weight(i) } else { 1.0 };
            if w == 0.0 {
                continue;
            }
            // lz = Λᵀ ZᵀZ
            for s in 0..q {
                for t in 0..q {
                    let mut acc = 0.0;
                    for k in s..q {
                        acc += l[k * q + s] * cl.ztz[k * q + t];
                    }
                    lz[s * q + t] = acc;
                }
            }
            // M = I + lz Λ (symmetric; lower triangle suffices)
            for s in 0..q {
                for t in 0..=s {
                    let mut acc = 0.0;
                    for k in t..q {
                        acc += lz[s * q + k] * l[k * q + t];
                    }
                    m[s * q + t] = acc + if s == t { 1.0 } else { 0.0 };
                }
            }
            // Cholesky of M into r (lower). M ⪰ I so pivots are ≥ 1.
            let mut ld = 0.0;
            for jj in 0..q {
                let mut d = m[jj * q + jj];
                for k in 0..jj {
                    d -= r[jj * q + k] * r[jj * q + k];
                }
                let rjj = d.sqrt();
                r[jj * q + jj] = rjj;
                ld += rjj.ln();
                for ii in (jj + 1)..q {
                    let mut s = m[ii * q + jj];
                    for k in 0..jj {
                        s -= r[ii * q + k] * r[jj * q + k];
                    }
                    r[ii * q + jj] = s / rjj;
                }
            }
            // a = R⁻¹ Λᵀ ZᵀX, c = R⁻¹ Λᵀ Zᵀr
            for s in 0..q {
                for col in 0..p {
                    let mut acc = 0.0;
                    for k in s..q {
                        acc += l[k * q + s] * cl.ztx[k * p + col];
                    }
                    for k in 0..s {
                        acc -= r[s * q + k] * a[k * p + col];
                    }
                    a[s * p + col] = acc / r[s * q + s];
                }
                let mut acc = 0.0;
                for k in s..q {
                    acc += l[k * q + s] * cl.zty[k];
                }
                for k in 0..s {
                    acc -= r[s * q + k] * c[k];
                }
                c[s] = acc / r[s * q + s];
            }
            for s in 0..p {
                for t in 0..=s {
                    let mut acc = cl.xtx[s * p + t];
                    for k in 0..q {
                        acc -= a[k * p + s] * a[k * p + t];
                    }
                    xax[s * p + t] += w * acc;
                }
                let mut acc = cl.xty[s];
                for k in 0..q {
                    acc -= a[k * p + s] * c[k];
                }
                xay[s] += w * acc;
            }
            let mut acc = cl.yty;
            for k in 0..q {
                acc -= c[k] * c[k];
            }
            yay += w * acc;
            logdet += w * 2.0 * ld;
            nw += w * cl.j;
        }
        for s in 0..p {
            for t in 0..s {
                xax[t * p + s] = xax[s * p + t];
            }
        }
        (xax, xay, yay, logdet, nw)
    }

    /// Profiled objective and the conditional estimates at θ.
    pub fn evaluate(&self, theta: &[f64], criterion: Criterion) -> Result<Evaluation, EstimationError> {
        let lambda = lambda_from_theta(theta, self.q);
        let (xax, xay, yay, logdet, nw) = self.accumulate(&lambda, true);
        let xtaix = Matrix::from_row_slice(self.p, self.p, &xax)?;
        let chol = cholesky(&xtaix).map_err(|_| EstimationError::RankDeficient)?;
        if chol.is_semidefinite() {
            return Err(EstimationError::RankDeficient);
        }
        let delta = chol.solve(&xay)?;
        let quad = (yay - delta.iter().zip(&xay).map(|(a, b)| a * b).sum::<f64>()).max(0.0);
        let two_pi = 2.0 * std::f64::consts::PI;
        let (objective, sigma2) = match criterion {
            Criterion::Ml => {
                let s2 = quad / nw;
                (nw * (1.0 + (two_pi * s2).ln()) + logdet, s2)
            }
            Criterion::Reml => {
                let dfr = self.n_obs as f64 - self.p as f64;
                let s2 = quad / dfr;
                (dfr * (1.0 + (two_pi * s2).ln()) + logdet + chol.log_det(), s2)
            }
        };
        let gamma = self.gamma_ols.iter().zip(&delta).map(|(a, b)| a + b).collect();
        Ok(Evaluation { objective, gamma, sigma2, xtaix, logdet_a: logdet, quad })
    }

    /// Objective only; non-finite values map to `+inf`.
    pub fn objective(&self, theta: &[f64], criterion: Criterion) -> f64 {
        match self.evaluate(theta, criterion) {
            Ok(e) if e.objective.is_finite() => e.objective,
            _ => f64::INFINITY,
        }
    }

    /// Unweighted `-2 log L` at arbitrary `(θ, γ, σ²)`.
    pub fn ml_deviance_at(&self, theta: &[f64], gamma: &[f64], sigma2: f64) -> f64 {
        let lambda = lambda_from_theta(theta, self.q);
        let (xax, xay, yay, logdet, nw) = self.accumulate(&lambda, false);
        let d: Vec<f64> = gamma.iter().zip(&self.gamma_ols).map(|(a, b)| a - b).collect();
        let p = self.p;
        let mut quad = yay;
        for s in 0..p {
            quad -= 2.0 * d[s] * xay[s];
            for t in 0..p {
                quad += d[s] * xax[s * p + t] * d[t];
            }
        }
        nw * (2.0 * std::f64::consts::PI * sigma2).ln() + logdet + quad / sigma2
    }
}
