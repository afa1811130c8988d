use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::series::{LaggedSeries, SeriesSet};

/// `β^(m) = ω_b + ω_w θ^(m)` for every series.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMtMs {
    pub omega_b: DVector<f64>,
    /// `n_coef x d_theta`.
    pub omega_w: DMatrix<f64>,
    /// `M x d_theta`.
    pub thetas: DMatrix<f64>,
}

impl LinearMtMs {
    pub fn d_theta(&self) -> usize {
        self.omega_w.ncols()
    }

    pub fn beta_for(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.omega_b + &self.omega_w * theta
    }

    pub fn beta(&self, m: usize) -> DVector<f64> {
        self.beta_for(&self.thetas.row(m).transpose())
    }

    pub fn betas(&self) -> Vec<DVector<f64>> {
        (0..self.thetas.nrows()).map(|m| self.beta(m)).collect()
    }

    pub fn objective(&self, set: &SeriesSet) -> f64 {
        set.sse(&self.betas())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlsConfig {
    pub max_iters: usize,
    /// Relative objective change that counts as converged.
    pub tol: f64,
    /// Added to the diagonal when a normal matrix cannot be factorized.
    pub ridge: f64,
}

impl Default for AlsConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-10,
            ridge: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AlsFit {
    pub model: LinearMtMs,
    /// Objective at the starting point and after every half-step.
    pub history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Some normal matrix needed the ridge fallback.
    pub ridge_used: bool,
}

impl AlsFit {
    /// Largest relative increase between consecutive half-steps.
    pub fn worst_increase(&self) -> f64 {
        self.history
            .windows(2)
            .map(|w| (w[1] - w[0]) / w[0].max(f64::MIN_POSITIVE))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Solves `a z = b` for symmetric positive definite `a`, retrying with a
/// ridge on the diagonal when the factorization fails.
pub(crate) fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>, ridge: f64, ridge_used: &mut bool) -> DVector<f64> {
    if let Some(ch) = a.clone().cholesky() {
        let z = ch.solve(b);
        if z.iter().all(|v| v.is_finite()) {
            return z;
        }
    }
    *ridge_used = true;
    log::warn!("normal matrix of size {} is singular; adding ridge {ridge}", a.nrows());
    let n = a.nrows();
    let reg = a + DMatrix::identity(n, n) * ridge;
    match reg.clone().cholesky() {
        Some(ch) => ch.solve(b),
        None => reg
            .svd(true, true)
            .solve(b, 1e-14)
            .unwrap_or_else(|_| DVector::zeros(n)),
    }
}

struct Gram {
    g: DMatrix<f64>,
    c: DVector<f64>,
}

fn grams(set: &SeriesSet) -> Vec<Gram> {
    set.series
        .iter()
        .map(|s| Gram {
            g: s.x.transpose() * &s.x,
            c: s.x.transpose() * &s.y,
        })
        .collect()
}

/// Least squares on all rows of all series stacked together.
pub fn pooled_ols(set: &SeriesSet, ridge: f64, ridge_used: &mut bool) -> DVector<f64> {
    let p = set.n_coef;
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    for gr in grams(set) {
        a += gr.g;
        b += gr.c;
    }
    solve_spd(a, &b, ridge, ridge_used)
}

pub fn series_ols(s: &LaggedSeries, ridge: f64, ridge_used: &mut bool) -> DVector<f64> {
    solve_spd(s.x.transpose() * &s.x, &(s.x.transpose() * &s.y), ridge, ridge_used)
}

/// Joint least-squares step for `[ω_b, ω_w]` given all mesa rows.
fn omega_step(grams: &[Gram], thetas: &DMatrix<f64>, p: usize, ridge: f64, ridge_used: &mut bool) -> (DVector<f64>, DMatrix<f64>) {
    let d = thetas.ncols();
    let q = p * (d + 1);
    let mut a = DMatrix::zeros(q, q);
    let mut b = DVector::zeros(q);
    for (m, gr) in grams.iter().enumerate() {
        let mut tt = vec![1.0; d + 1];
        for j in 0..d {
            tt[j + 1] = thetas[(m, j)];
        }
        for i in 0..=d {
            for j in 0..=d {
                let w = tt[i] * tt[j];
                if w != 0.0 {
                    let mut blk = a.view_mut((i * p, j * p), (p, p));
                    blk += &gr.g * w;
                }
            }
            let mut seg = b.rows_mut(i * p, p);
            seg += &gr.c * tt[i];
        }
    }
    let z = solve_spd(a, &b, ridge, ridge_used);
    let omega_b = z.rows(0, p).into_owned();
    let omega_w = DMatrix::from_fn(p, d, |r, c| z[(c + 1) * p + r]);
    (omega_b, omega_w)
}

fn theta_step(grams: &[Gram], model: &mut LinearMtMs, ridge: f64, ridge_used: &mut bool) {
    let wt = model.omega_w.transpose();
    for (m, gr) in grams.iter().enumerate() {
        let a = &wt * &gr.g * &model.omega_w;
        let rhs = &wt * (&gr.c - &gr.g * &model.omega_b);
        let th = solve_spd(a, &rhs, ridge, ridge_used);
        model.thetas.set_row(m, &th.transpose());
    }
}

/// Starting point from the principal directions of per-series OLS
/// coefficients.
fn pca_init(set: &SeriesSet, d: usize, ridge: f64, ridge_used: &mut bool) -> LinearMtMs {
    let p = set.n_coef;
    let m = set.len();
    let betas: Vec<DVector<f64>> = set.series.iter().map(|s| series_ols(s, ridge, ridge_used)).collect();
    let mut mean = DVector::zeros(p);
    for b in &betas {
        mean += b;
    }
    mean /= m as f64;
    let centered = DMatrix::from_fn(m, p, |r, c| betas[r][c] - mean[c]);
    let svd = centered.clone().svd(false, true);
    let vt = svd.v_t.expect("requested");
    let mut dirs: Vec<DVector<f64>> = (0..vt.nrows().min(d)).map(|i| vt.row(i).transpose()).collect();
    // Complete with coordinate axes when there are fewer components than d.
    let mut axis = 0;
    while dirs.len() < d {
        let mut v = DVector::zeros(p);
        v[axis] = 1.0;
        axis += 1;
        for u in &dirs {
            let proj = u.dot(&v);
            v -= u * proj;
        }
        let n = v.norm();
        if n > 1e-8 {
            dirs.push(v / n);
        }
    }
    let omega_w = DMatrix::from_columns(&dirs);
    let thetas = &centered * &omega_w;
    LinearMtMs {
        omega_b: mean,
        omega_w,
        thetas,
    }
}

/// Alternates the closed-form optimum for the meta coefficients given the
/// mesa rows and the per-series optimum for each mesa row given the meta
/// coefficients. Mesa rows are centered at the end.
pub fn als_fit(set: &SeriesSet, d_theta: usize, config: &AlsConfig) -> Result<AlsFit> {
    let p = set.n_coef;
    if d_theta > p {
        return Err(Error::Parameter(format!(
            "{d_theta} mesa parameters for {p} coefficients"
        )));
    }
    let mut ridge_used = false;
    let gr = grams(set);
    if d_theta == 0 {
        let omega_b = pooled_ols(set, config.ridge, &mut ridge_used);
        let model = LinearMtMs {
            omega_b,
            omega_w: DMatrix::zeros(p, 0),
            thetas: DMatrix::zeros(set.len(), 0),
        };
        let obj = model.objective(set);
        return Ok(AlsFit {
            model,
            history: vec![obj],
            iterations: 0,
            converged: true,
            ridge_used,
        });
    }
    let total: f64 = set.series.iter().map(|s| s.y.norm_squared()).sum();
    let mut model = pca_init(set, d_theta, config.ridge, &mut ridge_used);
    let mut history = vec![model.objective(set)];
    let mut converged = history[0] <= 1e-28 * total;
    let mut iterations = 0;
    for it in 0..if converged { 0 } else { config.max_iters } {
        iterations = it + 1;
        let start = *history.last().expect("non-empty");
        let (b, w) = omega_step(&gr, &model.thetas, p, config.ridge, &mut ridge_used);
        model.omega_b = b;
        model.omega_w = w;
        history.push(model.objective(set));
        theta_step(&gr, &mut model, config.ridge, &mut ridge_used);
        let end = model.objective(set);
        history.push(end);
        if start - end <= config.tol * start || end <= 1e-28 * total {
            converged = true;
            break;
        }
    }
    center(&mut model);
    Ok(AlsFit {
        model,
        history,
        iterations,
        converged,
        ridge_used,
    })
}

/// Shifts mesa rows to mean zero and absorbs the shift into `ω_b`.
fn center(model: &mut LinearMtMs) {
    let m = model.thetas.nrows();
    if m == 0 || model.d_theta() == 0 {
        return;
    }
    let mean = model.thetas.row_mean().transpose();
    model.omega_b += &model.omega_w * &mean;
    for r in 0..m {
        let row = model.thetas.row(r).transpose() - &mean;
        model.thetas.set_row(r, &row.transpose());
    }
}

/// Least-squares mesa vector for a new series with `ω` held fixed.
pub fn adapt_series(model: &LinearMtMs, series: &LaggedSeries, ridge: f64) -> (DVector<f64>, bool) {
    let mut ridge_used = false;
    let q = &series.x * &model.omega_w;
    let r = &series.y - &series.x * &model.omega_b;
    let th = solve_spd(q.transpose() * &q, &(q.transpose() * r), ridge, &mut ridge_used);
    (th, ridge_used)
}

/// Feeds each forecast back as lag 1. `beta[0]` is the intercept and
/// `beta[j]` multiplies lag `j`.
pub fn forecast_recursive(beta: &[f64], history: &[f64], horizon: usize) -> Result<Vec<f64>> {
    let d_x = beta.len().saturating_sub(1);
    if beta.is_empty() {
        return Err(Error::Parameter("empty coefficient vector".into()));
    }
    if history.len() < d_x {
        return Err(Error::Parameter(format!(
            "{} history values for {d_x} lags",
            history.len()
        )));
    }
    let mut window: Vec<f64> = history[history.len() - d_x..].to_vec();
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let mut f = beta[0];
        for j in 1..=d_x {
            f += beta[j] * window[window.len() - j];
        }
        out.push(f);
        if d_x > 0 {
            window.remove(0);
            window.push(f);
        }
    }
    Ok(out)
}
