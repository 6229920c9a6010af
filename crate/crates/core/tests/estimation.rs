use lmmci::data::{simulate_dataset, LongitudinalDataset, Record, SimulationDesignSpec};
use lmmci::estimation::profile::{Criterion, ProfiledModel};
use lmmci::estimation::{
    fit, from_reported, gls_fixed_effects, log_likelihood, marginal_covariance, reported_len, reported_values,
    FitMethod, ParameterSet,
};
use lmmci::formula::parse_formula;
use lmmci::numerics::{Matrix, RandomStream};
use proptest::prelude::*;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Gaussian elimination with partial pivoting: solves `A X = B` and returns
/// `(X, log|det A|)`.
fn gauss(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, f64) {
    let n = a.len();
    let mut logdet = 0.0;
    for k in 0..n {
        let piv = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        a.swap(k, piv);
        b.swap(k, piv);
        logdet += a[k][k].abs().ln();
        for i in (k + 1)..n {
            let f = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
            for j in 0..b[i].len() {
                b[i][j] -= f * b[k][j];
            }
        }
    }
    for k in (0..n).rev() {
        for j in 0..b[k].len() {
            let s: f64 = ((k + 1)..n).map(|i| a[k][i] * b[i][j]).sum();
            b[k][j] = (b[k][j] - s) / a[k][k];
        }
    }
    (b, logdet)
}

/// Dense `Zᵢ Σ Zᵢᵀ + σ² I` written out entry by entry.
fn dense_v(z: &[Vec<f64>], sigma: &[Vec<f64>], s2: f64) -> Vec<Vec<f64>> {
    let j = z.len();
    let q = sigma.len();
    (0..j)
        .map(|r| {
            (0..j)
                .map(|c| {
                    let mut v = if r == c { s2 } else { 0.0 };
                    for a in 0..q {
                        for b in 0..q {
                            v += z[r][a] * sigma[a][b] * z[c][b];
                        }
                    }
                    v
                })
                .collect()
        })
        .collect()
}

/// Multivariate normal log density summed over clusters, plus the REML
/// correction when `restricted`.
fn oracle_loglik(data: &LongitudinalDataset, params: &ParameterSet, restricted: bool) -> f64 {
    let sigma = params.sigma.to_rows();
    let p = data.p();
    let mut ll = 0.0;
    let mut info = vec![vec![0.0; p]; p];
    for c in &data.clusters {
        let z = c.z.to_rows();
        let x = c.x.to_rows();
        let v = dense_v(&z, &sigma, params.sigma_e2());
        let r: Vec<f64> = c.y.iter().zip(&x).map(|(y, xr)| y - xr.iter().zip(&params.gamma).map(|(a, b)| a * b).sum::<f64>()).collect();
        let mut rhs: Vec<Vec<f64>> = x.clone();
        for (row, ri) in rhs.iter_mut().zip(&r) {
            row.push(*ri);
        }
        let (sol, logdet) = gauss(v, rhs);
        let quad: f64 = r.iter().zip(&sol).map(|(a, s)| a * s[p]).sum();
        ll -= 0.5 * (c.len() as f64 * LN_2PI + logdet + quad);
        for a in 0..p {
            for b in 0..p {
                info[a][b] += (0..c.len()).map(|i| x[i][a] * sol[i][b]).sum::<f64>();
            }
        }
    }
    if restricted {
        let (_, ld) = gauss(info, vec![vec![]; p]);
        ll += -0.5 * ld + 0.5 * p as f64 * LN_2PI;
    }
    ll
}

fn dataset(formula: &str, rows: &[(&str, Vec<f64>, f64)]) -> LongitudinalDataset {
    let f = parse_formula(formula).unwrap();
    let recs = rows
        .iter()
        .enumerate()
        .map(|(i, (g, x, y))| Record { cluster: g.to_string(), response: *y, covariates: x.clone(), row_id: i })
        .collect();
    LongitudinalDataset::from_records(f, recs, 0).unwrap()
}

fn medsim(seed: u64) -> LongitudinalDataset {
    let design = SimulationDesignSpec::medsim().resolve().unwrap();
    simulate_dataset(&design, &mut RandomStream::new(seed, 0)).unwrap()
}

fn toy3() -> LongitudinalDataset {
    dataset(
        "y ~ x + (x|g)",
        &[
            ("a", vec![0.0], 1.0),
            ("a", vec![1.0], 2.5),
            ("a", vec![2.0], 2.9),
            ("b", vec![0.0], -0.4),
            ("b", vec![1.5], 1.7),
            ("c", vec![0.5], 3.1),
            ("c", vec![1.0], 2.2),
            ("c", vec![3.0], 6.0),
        ],
    )
}

#[test]
fn marginal_covariance_examples() {
    let d = dataset("y ~ 1 + (1|g)", &[("a", vec![], 1.0), ("a", vec![], 2.0), ("b", vec![], 0.0)]);
    let params = ParameterSet { gamma: vec![0.0], sigma: Matrix::from_rows(&[vec![3.0]]).unwrap(), sigma_e: 1.0 };
    let v = marginal_covariance(&d.clusters[0], &params).unwrap();
    assert_eq!(v.matrix().to_rows(), vec![vec![4.0, 3.0], vec![3.0, 4.0]]);

    let d = dataset("y ~ time + (time|g)", &[("a", vec![0.0], 1.0), ("a", vec![3.0], 2.0), ("b", vec![0.0], 0.0)]);
    let params = ParameterSet {
        gamma: vec![0.0, 0.0],
        sigma: Matrix::from_rows(&[vec![2111.54, -121.63], vec![-121.63, 63.74]]).unwrap(),
        sigma_e: 1229.93_f64.sqrt(),
    };
    let v = marginal_covariance(&d.clusters[0], &params).unwrap().matrix().to_rows();
    let expected = [
        [2111.54 + 1229.93, 2111.54 - 3.0 * 121.63],
        [2111.54 - 3.0 * 121.63, 2111.54 - 6.0 * 121.63 + 9.0 * 63.74 + 1229.93],
    ];
    for i in 0..2 {
        for j in 0..2 {
            assert!((v[i][j] - expected[i][j]).abs() < 1e-9, "({i},{j})");
        }
    }
}

#[test]
fn log_likelihood_matches_dense_density() {
    let d = toy3();
    let params = ParameterSet {
        gamma: vec![0.3, 1.2],
        sigma: Matrix::from_rows(&[vec![1.5, -0.2], vec![-0.2, 0.4]]).unwrap(),
        sigma_e: 0.7,
    };
    for restricted in [false, true] {
        let got = log_likelihood(&params, &d, restricted).unwrap();
        let want = oracle_loglik(&d, &params, restricted);
        assert!((got - want).abs() < 1e-10, "restricted={restricted}: {got} vs {want}");
    }
}

#[test]
fn fitted_criteria_match_dense_density() {
    let d = medsim(3);
    let ml = fit(&d, FitMethod::Ml).unwrap();
    assert!((ml.loglik - oracle_loglik(&d, &ml.params, false)).abs() < 1e-7 * ml.loglik.abs());
    assert!((ml.deviance + 2.0 * ml.loglik).abs() < 1e-9);
    let reml = fit(&d, FitMethod::Reml).unwrap();
    let crit = reml.reml_criterion.unwrap();
    assert!((crit + 2.0 * oracle_loglik(&d, &reml.params, true)).abs() < 1e-7 * crit.abs());
    assert!((reml.loglik - oracle_loglik(&d, &reml.params, false)).abs() < 1e-7 * reml.loglik.abs());
    assert!(ml.loglik >= reml.loglik - 1e-9);
}

#[test]
fn gls_reduces_to_ols_with_identity_covariance() {
    let d = toy3();
    let (gamma, cov) = gls_fixed_effects(&d, &Matrix::zeros(2, 2), 1.0).unwrap();
    let x = d.stacked_x().to_rows();
    let y = d.stacked_y();
    let xtx: Vec<Vec<f64>> = (0..2).map(|a| (0..2).map(|b| x.iter().map(|r| r[a] * r[b]).sum()).collect()).collect();
    let xty: Vec<Vec<f64>> = (0..2).map(|a| vec![x.iter().zip(&y).map(|(r, v)| r[a] * v).sum()]).collect();
    let (ols, _) = gauss(xtx.clone(), xty);
    let (inv, _) = gauss(xtx, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    for a in 0..2 {
        assert!((gamma[a] - ols[a][0]).abs() < 1e-12);
        for b in 0..2 {
            assert!((cov[(a, b)] - inv[a][b]).abs() < 1e-12);
        }
    }
}

#[test]
fn gls_examples() {
    // Balanced clusters: the GLS intercept is the grand mean.
    let rows: Vec<(&str, Vec<f64>, f64)> =
        ["a", "a", "b", "b", "c", "c"].iter().zip([1.0, 3.0, 4.0, 8.0, -2.0, 4.0]).map(|(g, y)| (*g, vec![], y)).collect();
    let d = dataset("y ~ 1 + (1|g)", &rows);
    let (gamma, _) = gls_fixed_effects(&d, &Matrix::from_rows(&[vec![2.0]]).unwrap(), 1.0).unwrap();
    assert!((gamma[0] - 3.0).abs() < 1e-12);

    // Unbalanced: 1ᵀV⁻¹1 is 1/2 and 2/3, 1ᵀV⁻¹y is 0 and 2.
    let d = dataset("y ~ 1 + (1|g)", &[("a", vec![], 0.0), ("b", vec![], 3.0), ("b", vec![], 3.0)]);
    let (gamma, cov) = gls_fixed_effects(&d, &Matrix::from_rows(&[vec![1.0]]).unwrap(), 1.0).unwrap();
    assert!((gamma[0] - 12.0 / 7.0).abs() < 1e-12);
    assert!((cov[(0, 0)] - 6.0 / 7.0).abs() < 1e-12);
}

fn balanced_rows() -> Vec<(String, f64)> {
    let ys = [
        [10.2, 11.9, 9.7, 10.8],
        [14.1, 13.2, 15.6, 14.4],
        [8.3, 7.1, 9.0, 8.8],
        [12.0, 12.5, 11.1, 13.3],
        [9.9, 11.4, 10.6, 10.1],
        [13.7, 12.2, 14.8, 13.0],
    ];
    ys.iter().enumerate().flat_map(|(i, r)| r.iter().map(move |&y| (format!("s{i}"), y))).collect()
}

/// Balanced one-way random-effects ANOVA has closed-form ML and REML estimates.
#[test]
fn balanced_anova_closed_form() {
    let rows = balanced_rows();
    let d = dataset("y ~ 1 + (1|g)", &rows.iter().map(|(g, y)| (g.as_str(), vec![], *y)).collect::<Vec<_>>());
    let (n, j) = (6.0, 4.0);
    let grand = rows.iter().map(|r| r.1).sum::<f64>() / (n * j);
    let means: Vec<f64> = (0..6).map(|i| rows[i * 4..i * 4 + 4].iter().map(|r| r.1).sum::<f64>() / j).collect();
    let ssw: f64 = (0..6).map(|i| rows[i * 4..i * 4 + 4].iter().map(|r| (r.1 - means[i]).powi(2)).sum::<f64>()).sum();
    let ssb_per: f64 = means.iter().map(|m| (m - grand).powi(2)).sum();
    let s2 = ssw / (n * (j - 1.0));
    let tau_ml = ssb_per / n - s2 / j;
    let tau_reml = ssb_per / (n - 1.0) - s2 / j;
    assert!(tau_ml > 0.0);

    let ml = fit(&d, FitMethod::Ml).unwrap();
    assert!((ml.params.gamma[0] - grand).abs() < 1e-6);
    assert!((ml.params.sigma_e2() - s2).abs() < 1e-5 * s2);
    assert!((ml.params.sigma[(0, 0)] - tau_ml).abs() < 1e-5 * tau_ml);
    let reml = fit(&d, FitMethod::Reml).unwrap();
    assert!((reml.params.sigma_e2() - s2).abs() < 1e-5 * s2);
    assert!((reml.params.sigma[(0, 0)] - tau_reml).abs() < 1e-5 * tau_reml);
}

/// Random-intercept model with a covariate: a grid plus golden-section search
/// over the variance ratio with γ and σ² profiled out in closed form.
#[test]
fn random_intercept_profile_search() {
    let rows = balanced_rows();
    let xs: Vec<f64> = (0..rows.len()).map(|i| ((i * 7) % 5) as f64 - 1.5).collect();
    let recs: Vec<(&str, Vec<f64>, f64)> =
        rows.iter().zip(&xs).map(|((g, y), x)| (g.as_str(), vec![*x], y + 0.8 * x)).collect();
    let d = dataset("y ~ x + (1|g)", &recs);
    let nobs = rows.len() as f64;
    let profile = |rho: f64| -> (f64, Vec<f64>, f64) {
        let mut xtx = vec![vec![0.0; 2]; 2];
        let mut xty = vec![vec![0.0]; 2];
        let apply = |v: &[f64], w: &[f64]| {
            let s: f64 = v.iter().sum::<f64>() * w.iter().sum::<f64>();
            v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() - rho / (1.0 + 4.0 * rho) * s
        };
        for i in 0..6 {
            let cols = [vec![1.0; 4], xs[i * 4..i * 4 + 4].to_vec()];
            let y: Vec<f64> = recs[i * 4..i * 4 + 4].iter().map(|r| r.2).collect();
            for a in 0..2 {
                for b in 0..2 {
                    xtx[a][b] += apply(&cols[a], &cols[b]);
                }
                xty[a][0] += apply(&cols[a], &y);
            }
        }
        let (g, _) = gauss(xtx, xty);
        let gamma = vec![g[0][0], g[1][0]];
        let mut quad = 0.0;
        for i in 0..6 {
            let r: Vec<f64> = (0..4).map(|k| recs[i * 4 + k].2 - gamma[0] - gamma[1] * xs[i * 4 + k]).collect();
            quad += apply(&r, &r);
        }
        let s2 = quad / nobs;
        let ll = -0.5 * (nobs * (LN_2PI + s2.ln() + 1.0) + 6.0 * (1.0 + 4.0 * rho).ln());
        (ll, gamma, s2)
    };
    let grid: Vec<f64> = (0..=400).map(|k| 10f64.powf(-4.0 + k as f64 * 0.015)).collect();
    let best = (0..grid.len()).max_by(|&a, &b| profile(grid[a]).0.total_cmp(&profile(grid[b]).0)).unwrap();
    let (mut lo, mut hi) = (grid[best.saturating_sub(1)], grid[(best + 1).min(grid.len() - 1)]);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let m1 = hi - phi * (hi - lo);
        let m2 = lo + phi * (hi - lo);
        if profile(m1).0 < profile(m2).0 {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    let rho = 0.5 * (lo + hi);
    let (ll, gamma, s2) = profile(rho);

    let ml = fit(&d, FitMethod::Ml).unwrap();
    assert!((ml.loglik - ll).abs() < 1e-7, "{} vs {ll}", ml.loglik);
    assert!(ml.loglik >= ll - 1e-9);
    for k in 0..2 {
        assert!((ml.params.gamma[k] - gamma[k]).abs() < 1e-4);
    }
    assert!((ml.params.sigma_e2() - s2).abs() < 1e-4 * s2);
    assert!((ml.params.sigma[(0, 0)] - rho * s2).abs() < 1e-3 * rho * s2);
}

#[test]
fn ml_optimum_is_stationary_and_maximal() {
    let d = medsim(11);
    let ml = fit(&d, FitMethod::Ml).unwrap();
    assert!(ml.converged);
    let model = ProfiledModel::new(&d, None).unwrap();
    let f0 = model.objective(&ml.theta, Criterion::Ml);
    for i in 0..ml.theta.len() {
        let h = 1e-4 * (1.0 + ml.theta[i].abs());
        let mut tp = ml.theta.clone();
        let mut tm = ml.theta.clone();
        tp[i] += h;
        tm[i] -= h;
        let g = (model.objective(&tp, Criterion::Ml) - model.objective(&tm, Criterion::Ml)) / (2.0 * h);
        assert!(g.abs() < 1e-3, "gradient {i}: {g}");
        assert!(model.objective(&tp, Criterion::Ml) >= f0 - 1e-9);
        assert!(model.objective(&tm, Criterion::Ml) >= f0 - 1e-9);
    }
    let mut rng = RandomStream::new(99, 0);
    let base = reported_values(&ml.params);
    for _ in 0..100 {
        let v: Vec<f64> = base
            .iter()
            .enumerate()
            .map(|(k, &b)| {
                let u = rng.standard_normal() * 0.05;
                if k == 6 {
                    (b + u).clamp(-0.99, 0.99)
                } else {
                    b * (1.0 + u) + u
                }
            })
            .collect();
        let params = from_reported(&v, 4, 2).unwrap();
        let ll = log_likelihood(&params, &d, false).unwrap();
        assert!(ll <= ml.loglik + 1e-8 * ml.loglik.abs(), "{ll} > {}", ml.loglik);
    }
}

#[test]
fn translation_and_permutation_invariance() {
    let d = medsim(21);
    let base = fit(&d, FitMethod::Reml).unwrap();
    let delta = [5.0, -2.0, 0.5, 1.25];
    let ys: Vec<Vec<f64>> = d
        .clusters
        .iter()
        .map(|c| {
            let shift = c.x.mul_vec(&delta).unwrap();
            c.y.iter().zip(shift).map(|(y, s)| y + s).collect()
        })
        .collect();
    let shifted = fit(&d.with_responses(ys).unwrap(), FitMethod::Reml).unwrap();
    for k in 0..4 {
        assert!((shifted.params.gamma[k] - base.params.gamma[k] - delta[k]).abs() < 1e-5 * (1.0 + delta[k].abs()));
    }
    assert!(shifted.params.sigma.max_abs_diff(&base.params.sigma) < 1e-4 * base.params.sigma.max_abs_diag());
    assert!((shifted.params.sigma_e - base.params.sigma_e).abs() < 1e-5 * base.params.sigma_e);

    let perm: Vec<usize> = (0..d.n()).rev().collect();
    let permuted = fit(&d.permuted(&perm), FitMethod::Reml).unwrap();
    let (a, b) = (reported_values(&base.params), reported_values(&permuted.params));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-5 * (1.0 + x.abs()), "{x} vs {y}");
    }
}

#[test]
fn zero_variance_fit() {
    let rows: Vec<(&str, Vec<f64>, f64)> = ["a", "a", "b", "b", "c", "c"]
        .iter()
        .zip([0.0, 1.0, 0.0, 2.0, 1.0, 3.0])
        .map(|(g, x)| (*g, vec![x], 2.0 + 3.0 * x))
        .collect();
    let d = dataset("y ~ x + (1|g)", &rows);
    for method in [FitMethod::Ml, FitMethod::Reml] {
        let f = fit(&d, method).unwrap();
        assert!(f.converged && f.boundary);
        assert_eq!(f.params.sigma_e, 0.0);
        assert_eq!(f.params.sigma[(0, 0)], 0.0);
        assert!((f.params.gamma[0] - 2.0).abs() < 1e-12 && (f.params.gamma[1] - 3.0).abs() < 1e-12);
    }
}

#[test]
fn too_few_clusters_rejected() {
    let d = dataset("y ~ 1 + (1|g)", &[("a", vec![], 1.0), ("b", vec![], 2.0)]);
    let mut one = d.clone();
    one.clusters.truncate(1);
    assert!(fit(&one, FitMethod::Ml).is_err());
}

fn parameter_set() -> impl Strategy<Value = ParameterSet> {
    (1usize..5, 1usize..4).prop_flat_map(|(p, q)| {
        (
            prop::collection::vec(-100.0..100.0_f64, p),
            prop::collection::vec(-2.0..2.0_f64, q * q),
            0.01..50.0_f64,
        )
            .prop_map(move |(gamma, l, sigma_e)| {
                let mut lower = Matrix::zeros(q, q);
                for i in 0..q {
                    for j in 0..=i {
                        lower[(i, j)] = if i == j { 0.1 + l[i * q + j].abs() } else { l[i * q + j] };
                    }
                }
                let mut sigma = lower.matmul(&lower.transpose()).unwrap();
                sigma.mirror_lower();
                ParameterSet { gamma, sigma, sigma_e }
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn reported_round_trip(params in parameter_set()) {
        let p = params.gamma.len();
        let q = params.sigma.rows();
        let v = reported_values(&params);
        prop_assert_eq!(v.len(), reported_len(p, q));
        prop_assert_eq!(v.len(), p + q + q * (q - 1) / 2 + 1);
        let back = from_reported(&v, p, q).unwrap();
        prop_assert_eq!(&back.gamma, &params.gamma);
        prop_assert_eq!(back.sigma_e, params.sigma_e);
        prop_assert!(back.sigma.max_abs_diff(&params.sigma) <= 1e-10 * (1.0 + params.sigma.max_abs_diag()));
        for r in &v[p + q..v.len() - 1] {
            prop_assert!((-1.0..=1.0).contains(r));
        }
    }
}
