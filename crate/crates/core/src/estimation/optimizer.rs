//! Derivative-free minimisation for the profiled deviance: Nelder–Mead with
//! restarts from the incumbent, followed by a finite-difference Newton polish.

use crate::numerics::{cholesky, Matrix};

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    pub max_iter: usize,
    /// Stop when `f_max - f_min <= ftol_rel * (|f_min| + 1e-8)`.
    pub ftol_rel: f64,
    /// ... and the simplex diameter is below `xtol * (1 + |x_best|)`.
    pub xtol: f64,
    pub restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self { max_iter: 2000, ftol_rel: 1e-8, xtol: 1e-4, restarts: 3 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
}

fn initial_steps(x0: &[f64]) -> Vec<f64> {
    x0.iter().map(|&v| if v.abs() > 1e-3 { 0.2 * v.abs() } else { 0.1 }).collect()
}

struct Counted<F> {
    f: F,
    evals: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counted<F> {
    fn call(&mut self, x: &[f64]) -> f64 {
        self.evals += 1;
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

fn nelder_mead_run<F: FnMut(&[f64]) -> f64>(
    obj: &mut Counted<F>,
    x0: &[f64],
    f0: f64,
    opts: &NelderMeadOptions,
) -> (Vec<f64>, f64, bool, usize) {
    let n = x0.len();
    let steps = initial_steps(x0);
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut values: Vec<f64> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    values.push(f0);
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += steps[i];
        values.push(obj.call(&v));
        simplex.push(v);
    }
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut order: Vec<usize> = (0..=n).collect();
    let mut iter = 0;
    let mut converged = false;
    while iter < opts.max_iter {
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let best = order[0];
        let worst = order[n];
        let second = order[n - 1];
        let fspread = values[worst] - values[best];
        let diameter = simplex
            .iter()
            .map(|v| v.iter().zip(&simplex[best]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        let xnorm = simplex[best].iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if values[best].is_finite()
            && fspread <= opts.ftol_rel * (values[best].abs() + 1e-8)
            && diameter <= opts.xtol * (1.0 + xnorm)
        {
            converged = true;
            break;
        }
        iter += 1;
        let mut centroid = vec![0.0; n];
        for &k in &order[..n] {
            for (c, v) in centroid.iter_mut().zip(&simplex[k]) {
                *c += v / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid.iter().zip(&simplex[worst]).map(|(c, w)| c + t * (c - w)).collect()
        };
        let xr = along(alpha);
        let fr = obj.call(&xr);
        if fr < values[best] {
            let xe = along(gamma);
            let fe = obj.call(&xe);
            if fe < fr {
                simplex[worst] = xe;
                values[worst] = fe;
            } else {
                simplex[worst] = xr;
                values[worst] = fr;
            }
            continue;
        }
        if fr < values[second] {
            simplex[worst] = xr;
            values[worst] = fr;
            continue;
        }
        // Contraction, outside or inside.
        let (xc, fc) = if fr < values[worst] {
            let xc = along(rho);
            let fc = obj.call(&xc);
            (xc, fc)
        } else {
            let xc = along(-rho);
            let fc = obj.call(&xc);
            (xc, fc)
        };
        if fc < values[worst].min(fr) {
            simplex[worst] = xc;
            values[worst] = fc;
            continue;
        }
        // Shrink towards the best vertex.
        let xb = simplex[best].clone();
        for k in 0..=n {
            if k == best {
                continue;
            }
            for (v, b) in simplex[k].iter_mut().zip(&xb) {
                *v = b + sigma * (*v - b);
            }
            values[k] = obj.call(&simplex[k]);
        }
    }
    let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
    (simplex[best].clone(), values[best], converged, iter)
}

fn fd_steps(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| 1e-4 * v.abs().max(0.1)).collect()
}

/// Central-difference gradient and Hessian.
pub fn fd_gradient_hessian<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], f0: f64) -> (Vec<f64>, Matrix) {
    let n = x.len();
    let h = fd_steps(x);
    let mut g = vec![0.0; n];
    let mut hess = Matrix::zeros(n, n);
    let mut xp = x.to_vec();
    for i in 0..n {
        xp[i] = x[i] + h[i];
        let fp = f(&xp);
        xp[i] = x[i] - h[i];
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h[i]);
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
    }
    for i in 0..n {
        for j in 0..i {
            let mut eval = |si: f64, sj: f64| {
                xp[i] = x[i] + si * h[i];
                xp[j] = x[j] + sj * h[j];
                let v = f(&xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    (g, hess)
}

/// Newton steps with finite-difference derivatives; each step is accepted
/// only if it lowers the objective.
fn newton_polish<F: FnMut(&[f64]) -> f64>(obj: &mut Counted<F>, x: &mut Vec<f64>, f: &mut f64) {
    for _ in 0..6 {
        let mut call = |v: &[f64]| obj.call(v);
        let (g, h) = fd_gradient_hessian(&mut call, x, *f);
        if g.iter().chain(h.as_slice()).any(|v| !v.is_finite()) {
            return;
        }
        let Ok(chol) = cholesky(&h) else { return };
        if chol.is_semidefinite() {
            return;
        }
        let Ok(step) = chol.solve(&g) else { return };
        let mut improved = false;
        let mut t = 1.0;
        for _ in 0..4 {
            let cand: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a - t * s).collect();
            let fc = obj.call(&cand);
            if fc < *f {
                let gain = *f - fc;
                *x = cand;
                *f = fc;
                improved = gain > 1e-13 * (f.abs() + 1.0);
                break;
            }
            t *= 0.5;
        }
        if !improved {
            return;
        }
    }
}

/// Minimises `f` from `x0`.
pub fn minimize<F: FnMut(&[f64]) -> f64>(f: F, x0: &[f64], opts: &NelderMeadOptions) -> Minimum {
    let mut obj = Counted { f, evals: 0 };
    let f0 = obj.call(x0);
    if x0.is_empty() {
        return Minimum { x: Vec::new(), f: f0, converged: true, iterations: 0, evaluations: 1 };
    }
    let (mut x, mut fx, mut converged, mut iterations) = nelder_mead_run(&mut obj, x0, f0, opts);
    for _ in 0..opts.restarts {
        let (x2, f2, c2, it2) = nelder_mead_run(&mut obj, &x, fx, opts);
        iterations += it2;
        let gain = fx - f2;
        if f2 <= fx {
            x = x2;
            fx = f2;
            converged = c2;
        }
        if gain <= opts.ftol_rel * (fx.abs() + 1e-8) {
            break;
        }
    }
    newton_polish(&mut obj, &mut x, &mut fx);
    Minimum { x, f: fx, converged, iterations, evaluations: obj.evals }
}
