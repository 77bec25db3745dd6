//! Weighted nonlinear least squares (Levenberg-Marquardt with a central
//! difference Jacobian) and the correlation and linewidth models fitted to
//! the measured data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outcome of a model fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub names: Vec<String>,
    pub params: Vec<f64>,
    /// 1σ standard errors, sqrt of the covariance diagonal.
    pub errors: Vec<f64>,
    /// (JᵀWJ)⁻¹ scaled by the reduced χ².
    pub covariance: Vec<Vec<f64>>,
    /// Σ wᵢ(yᵢ − f(xᵢ))² at the returned point.
    pub chi2: f64,
    pub reduced_chi2: f64,
    pub iterations: usize,
    pub converged: bool,
    /// ∞-norm of the cost gradient at the returned point.
    pub gradient_norm: f64,
}

impl FitResult {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.params[i])
    }

    pub fn error(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.errors[i])
    }

    fn name(mut self, names: &[&str]) -> Self {
        self.names = names.iter().map(|s| s.to_string()).collect();
        self
    }
}

/// Stopping rules for [`lm_fit`].
#[derive(Debug, Clone, Copy)]
pub struct LmSettings {
    pub max_iterations: usize,
    /// Converge when an accepted step lowers the cost by less than this fraction.
    pub cost_tolerance: f64,
    /// Converge when the cost gradient ∞-norm drops below this.
    pub gradient_tolerance: f64,
    pub initial_damping: f64,
}

impl Default for LmSettings {
    fn default() -> Self {
        LmSettings {
            max_iterations: 500,
            cost_tolerance: 1e-10,
            gradient_tolerance: 1e-8,
            initial_damping: 1e-3,
        }
    }
}

const MAX_DAMPING: f64 = 1e16;

/// Solves `a·x = b` in place by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return None;
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() <= scale * 1e-14 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn invert(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        cols.push(solve(a.to_vec(), e)?);
    }
    Some(
        (0..n)
            .map(|i| (0..n).map(|j| cols[j][i]).collect())
            .collect(),
    )
}

struct Problem<'a, F> {
    model: &'a F,
    x: &'a [f64],
    y: &'a [f64],
    sqrt_w: Vec<f64>,
}

impl<F: Fn(&[f64], f64) -> f64> Problem<'_, F> {
    fn residuals(&self, p: &[f64]) -> Vec<f64> {
        self.x
            .iter()
            .zip(self.y)
            .zip(&self.sqrt_w)
            .map(|((&xi, &yi), &sw)| sw * (yi - (self.model)(p, xi)))
            .collect()
    }

    fn cost(r: &[f64]) -> f64 {
        r.iter().map(|v| v * v).sum()
    }

    /// Weighted Jacobian of the model, one row per data point.
    fn jacobian(&self, p: &[f64]) -> Vec<Vec<f64>> {
        let cols: Vec<Vec<f64>> = (0..p.len())
            .map(|j| {
                let d = numeric_derivative(self.model, p, j, self.x);
                d.iter().zip(&self.sqrt_w).map(|(v, sw)| v * sw).collect()
            })
            .collect();
        (0..self.x.len())
            .map(|i| cols.iter().map(|c| c[i]).collect())
            .collect()
    }
}

/// Central-difference derivative of the model with respect to parameter `j`,
/// evaluated at every `x`.
pub fn numeric_derivative<F: Fn(&[f64], f64) -> f64>(
    model: &F,
    p: &[f64],
    j: usize,
    x: &[f64],
) -> Vec<f64> {
    let h = f64::EPSILON.cbrt() * p[j].abs().max(1e-8);
    let mut up = p.to_vec();
    let mut down = p.to_vec();
    up[j] += h;
    down[j] -= h;
    let width = up[j] - down[j];
    x.iter()
        .map(|&xi| (model(&up, xi) - model(&down, xi)) / width)
        .collect()
}

fn normal_equations(jac: &[Vec<f64>], r: &[f64], m: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut a = vec![vec![0.0; m]; m];
    let mut g = vec![0.0; m];
    for (row, ri) in jac.iter().zip(r) {
        for i in 0..m {
            g[i] += row[i] * ri;
            for k in i..m {
                a[i][k] += row[i] * row[k];
            }
        }
    }
    for i in 0..m {
        for k in 0..i {
            a[i][k] = a[k][i];
        }
    }
    (a, g)
}

/// Minimizes Σ wᵢ(yᵢ − model(p, xᵢ))² from `p0`.
///
/// Steps solve (JᵀWJ + λ·diag JᵀWJ)·δ = JᵀW r. A step that lowers the cost is
/// taken and λ shrinks tenfold; otherwise λ grows tenfold and the step is
/// retried. The fit is converged once an accepted step changes the cost by
/// less than `cost_tolerance` relative, or the cost gradient falls below
/// `gradient_tolerance`. When the iteration limit is hit the best point is
/// returned with `converged = false`.
pub fn lm_fit<F: Fn(&[f64], f64) -> f64>(
    model: &F,
    x: &[f64],
    y: &[f64],
    weights: &[f64],
    p0: &[f64],
) -> Result<FitResult> {
    lm_fit_with(model, x, y, weights, p0, &LmSettings::default())
}

pub fn lm_fit_with<F: Fn(&[f64], f64) -> f64>(
    model: &F,
    x: &[f64],
    y: &[f64],
    weights: &[f64],
    p0: &[f64],
    settings: &LmSettings,
) -> Result<FitResult> {
    let n = x.len();
    let m = p0.len();
    if y.len() != n || weights.len() != n {
        return Err(Error::arg(format!(
            "x, y and weights differ in length ({n}, {}, {})",
            y.len(),
            weights.len()
        )));
    }
    if m == 0 || n <= m {
        return Err(Error::arg(format!(
            "need more data points ({n}) than parameters ({m})"
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::arg("weights must be finite and >= 0"));
    }
    if y.iter().chain(x).chain(p0).any(|v| !v.is_finite()) {
        return Err(Error::arg("data and starting point must be finite"));
    }

    let problem = Problem {
        model,
        x,
        y,
        sqrt_w: weights.iter().map(|w| w.sqrt()).collect(),
    };
    let mut p = p0.to_vec();
    let mut r = problem.residuals(&p);
    let mut cost = Problem::<F>::cost(&r);
    if !cost.is_finite() {
        return Err(Error::arg("model is not finite at the starting point"));
    }
    let mut lambda = settings.initial_damping;
    let mut converged = false;
    let mut iterations = 0;

    'outer: while iterations < settings.max_iterations {
        iterations += 1;
        let jac = problem.jacobian(&p);
        let (a, g) = normal_equations(&jac, &r, m);
        let grad_norm = 2.0 * g.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if cost == 0.0 || grad_norm < settings.gradient_tolerance {
            converged = true;
            break;
        }
        let diag_floor = a.iter().enumerate().fold(0.0f64, |acc, (i, row)| acc.max(row[i])) * 1e-15;
        loop {
            let mut damped = a.clone();
            for (i, row) in damped.iter_mut().enumerate() {
                row[i] += lambda * a[i][i].max(diag_floor);
            }
            let step = match solve(damped, g.clone()) {
                Some(step) => step,
                None if iterations == 1 && lambda == settings.initial_damping => {
                    return Err(Error::SingularSystem { iteration: iterations });
                }
                None => {
                    lambda *= 10.0;
                    if lambda > MAX_DAMPING {
                        break 'outer;
                    }
                    continue;
                }
            };
            let trial: Vec<f64> = p.iter().zip(&step).map(|(a, b)| a + b).collect();
            let trial_r = problem.residuals(&trial);
            let trial_cost = Problem::<F>::cost(&trial_r);
            if trial_cost.is_finite() && trial_cost < cost {
                let relative = (cost - trial_cost) / cost;
                p = trial;
                r = trial_r;
                cost = trial_cost;
                lambda = (lambda / 10.0).max(1e-12);
                if relative < settings.cost_tolerance {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > MAX_DAMPING {
                // no downhill step left at machine precision: a stationary point
                converged = true;
                break 'outer;
            }
        }
    }

    let jac = problem.jacobian(&p);
    let (a, g) = normal_equations(&jac, &r, m);
    let gradient_norm = 2.0 * g.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if !converged && gradient_norm < settings.gradient_tolerance {
        converged = true;
    }
    let inverse = invert(&a).ok_or(Error::SingularSystem {
        iteration: iterations,
    })?;
    let reduced_chi2 = cost / (n - m) as f64;
    let covariance: Vec<Vec<f64>> = inverse
        .iter()
        .map(|row| row.iter().map(|v| v * reduced_chi2).collect())
        .collect();
    let errors = (0..m).map(|i| covariance[i][i].max(0.0).sqrt()).collect();
    Ok(FitResult {
        names: (0..m).map(|i| format!("p{i}")).collect(),
        params: p,
        errors,
        covariance,
        chi2: cost,
        reduced_chi2,
        iterations,
        converged,
        gradient_norm,
    })
}

/// Poisson weights 1/max(y, 1).
pub fn poisson_weights(y: &[f64]) -> Vec<f64> {
    y.iter().map(|v| 1.0 / v.max(1.0)).collect()
}

/// Weights for a normalized quantity `g = count / scale`: var(g) = max(count, 1)/scale².
pub fn poisson_weights_scaled(counts: &[u64], scale: f64) -> Vec<f64> {
    counts
        .iter()
        .map(|&c| scale * scale / (c.max(1) as f64))
        .collect()
}

/// A fit that could not be carried out, reported instead of an error.
fn unconverged(names: &[&str], p0: Vec<f64>) -> FitResult {
    let m = p0.len();
    FitResult {
        names: names.iter().map(|s| s.to_string()).collect(),
        params: p0,
        errors: vec![f64::INFINITY; m],
        covariance: vec![vec![f64::NAN; m]; m],
        chi2: f64::NAN,
        reduced_chi2: f64::NAN,
        iterations: 0,
        converged: false,
        gradient_norm: f64::NAN,
    }
}

/// Runs the fit, turning an unidentifiable model (singular normal matrix)
/// into a non-converged result.
fn fit_or_report<F: Fn(&[f64], f64) -> f64>(
    model: &F,
    x: &[f64],
    y: &[f64],
    weights: &[f64],
    p0: Vec<f64>,
    names: &[&str],
) -> Result<FitResult> {
    match lm_fit(model, x, y, weights, &p0) {
        Ok(fit) => Ok(fit.name(names)),
        Err(Error::SingularSystem { .. }) => Ok(unconverged(names, p0)),
        Err(e) => Err(e),
    }
}

fn sorted_by_key(x: &[f64], y: &[f64], key: impl Fn(f64) -> f64) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pts.sort_by(|a, b| key(a.0).total_cmp(&key(b.0)).then(a.1.total_cmp(&b.1)));
    pts
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Lag at which `excess(τ)` first falls to 1/e of its peak, relative to the
/// peak position. Falls back to a quarter of the lag span.
fn decay_guess(pts: &[(f64, f64)], key: impl Fn(f64) -> f64, excess: impl Fn(f64) -> f64) -> f64 {
    let span = key(pts[pts.len() - 1].0) - key(pts[0].0);
    let (peak_i, peak) = pts
        .iter()
        .enumerate()
        .map(|(i, p)| (i, excess(p.1)))
        .fold((0, f64::MIN), |acc, v| if v.1 > acc.1 { v } else { acc });
    let guess = pts[peak_i..]
        .iter()
        .find(|p| excess(p.1) <= peak / std::f64::consts::E)
        .map(|p| key(p.0) - key(pts[peak_i].0));
    match guess {
        Some(g) if g > 0.0 => g,
        _ => (span / 4.0).max(f64::MIN_POSITIVE),
    }
}

/// `B + A·exp(−τ/τ₀)`, parameters `[A, B, τ₀]`.
pub fn exp_decay_model(p: &[f64], tau: f64) -> f64 {
    p[1] + p[0] * (-tau / p[2]).exp()
}

/// `C·(1 + D·exp(−|τ|/τ₀))`, parameters `[C, D, τ₀]`.
pub fn hbt_model(p: &[f64], tau: f64) -> f64 {
    p[0] * (1.0 + p[1] * (-tau.abs() / p[2]).exp())
}

/// How the constant background (B of the exponential, C of the bunching
/// model) is treated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Baseline {
    /// Fitted along with the other parameters.
    Free,
    /// Held at a value measured elsewhere, e.g. the mean of a flat lag region.
    Fixed { value: f64, error: f64 },
}

/// Fits `g(τ) = B + A·exp(−τ/τ₀)` for τ ≥ 0 with default weights 1/max(g, 1).
pub fn fit_exp_decay(lags: &[f64], g2: &[f64]) -> Result<FitResult> {
    fit_exp_decay_with(lags, g2, &poisson_weights(g2), Baseline::Free)
}

/// Fits `g(τ) = B + A·exp(−τ/τ₀)` with explicit weights and baseline handling.
///
/// Start values: B from the mean of the last quartile in lag, A = max − B,
/// τ₀ from where g − B falls to (max − B)/e.
pub fn fit_exp_decay_with(
    lags: &[f64],
    g2: &[f64],
    weights: &[f64],
    baseline: Baseline,
) -> Result<FitResult> {
    const NAMES: [&str; 3] = ["A", "B", "tau0"];
    if lags.len() != g2.len() {
        return Err(Error::arg("lags and g2 differ in length"));
    }
    if lags.len() < 4 {
        return Err(Error::arg("exponential fit needs at least 4 points"));
    }
    if lags.iter().any(|&t| t < 0.0) {
        return Err(Error::arg("exponential fit needs lags >= 0"));
    }
    let pts = sorted_by_key(lags, g2, |t| t);
    let tail = &pts[pts.len() - pts.len() / 4..];
    let b0 = match baseline {
        Baseline::Free => mean(tail.iter().map(|p| p.1)),
        Baseline::Fixed { value, .. } => value,
    };
    let max = pts.iter().map(|p| p.1).fold(f64::MIN, f64::max);
    let a0 = max - b0;
    let tau0 = decay_guess(&pts, |t| t, |g| g - b0);
    let p0 = vec![a0, b0, tau0];
    if !(a0 > 0.0) {
        return Ok(unconverged(&NAMES, p0));
    }
    match baseline {
        Baseline::Free => fit_or_report(&exp_decay_model, lags, g2, weights, p0, &NAMES),
        Baseline::Fixed { value, error } => {
            let model = |q: &[f64], t: f64| exp_decay_model(&[q[0], value, q[1]], t);
            let fit = fit_or_report(&model, lags, g2, weights, vec![a0, tau0], &["A", "tau0"])?;
            Ok(insert_fixed(fit, 1, "B", value, error))
        }
    }
}

/// Re-inserts a held parameter into a fit result, uncorrelated with the rest.
fn insert_fixed(mut fit: FitResult, at: usize, name: &str, value: f64, error: f64) -> FitResult {
    fit.names.insert(at, name.to_string());
    fit.params.insert(at, value);
    fit.errors.insert(at, error);
    for row in fit.covariance.iter_mut() {
        row.insert(at, 0.0);
    }
    let m = fit.params.len();
    let mut held = vec![0.0; m];
    held[at] = error * error;
    fit.covariance.insert(at, held);
    fit
}

/// Fits the autocorrelation `g(τ) = C·(1 + D·exp(−|τ|/τ₀))` with default
/// weights 1/max(g, 1).
pub fn fit_hbt(lags: &[f64], g2: &[f64]) -> Result<FitResult> {
    fit_hbt_with(lags, g2, &poisson_weights(g2), Baseline::Free)
}

/// Autocorrelation fit with explicit weights; `baseline` fixes or frees C.
///
/// Start values: C from the mean of the outer quartile in |τ|, D = max/C − 1,
/// τ₀ from where g/C − 1 falls to D/e.
pub fn fit_hbt_with(
    lags: &[f64],
    g2: &[f64],
    weights: &[f64],
    baseline: Baseline,
) -> Result<FitResult> {
    const NAMES: [&str; 3] = ["C", "D", "tau0"];
    if lags.len() != g2.len() {
        return Err(Error::arg("lags and g2 differ in length"));
    }
    if lags.len() < 4 {
        return Err(Error::arg("autocorrelation fit needs at least 4 points"));
    }
    let pts = sorted_by_key(lags, g2, f64::abs);
    let c0 = match baseline {
        Baseline::Free => mean(pts[pts.len() - pts.len() / 4..].iter().map(|p| p.1)),
        Baseline::Fixed { value, .. } => value,
    };
    let max = pts.iter().map(|p| p.1).fold(f64::MIN, f64::max);
    let d0 = max / c0 - 1.0;
    let tau0 = decay_guess(&pts, f64::abs, |g| g / c0 - 1.0);
    let p0 = vec![c0, d0, tau0];
    if !(c0 > 0.0 && d0 > 0.0) {
        return Ok(unconverged(&NAMES, p0));
    }
    match baseline {
        Baseline::Free => fit_or_report(&hbt_model, lags, g2, weights, p0, &NAMES),
        Baseline::Fixed { value, error } => {
            let model = |q: &[f64], t: f64| hbt_model(&[value, q[0], q[1]], t);
            let fit = fit_or_report(&model, lags, g2, weights, vec![d0, tau0], &["D", "tau0"])?;
            Ok(insert_fixed(fit, 0, "C", value, error))
        }
    }
}

/// g²(0) = C·(1 + D) of an autocorrelation fit, with its propagated 1σ error.
pub fn hbt_zero_lag(fit: &FitResult) -> (f64, f64) {
    let (c, d) = (fit.params[0], fit.params[1]);
    let cov = &fit.covariance;
    // gradient of C(1+D) w.r.t. (C, D)
    let (gc, gd) = (1.0 + d, c);
    let var = gc * gc * cov[0][0] + gd * gd * cov[1][1] + 2.0 * gc * gd * cov[0][1];
    (c * (1.0 + d), var.max(0.0).sqrt())
}

/// Weighted one-parameter fit of `fwhm = Γ₀·(1 + k·OD)` with Γ₀ held fixed.
///
/// `sigmas` are the 1σ errors of the widths; `None` weighs all points
/// equally. The error on k is scaled by the reduced χ².
pub fn fit_superradiance(
    od: &[f64],
    fwhm_mhz: &[f64],
    sigmas: Option<&[f64]>,
    gamma0_mhz: f64,
) -> Result<FitResult> {
    if od.len() != fwhm_mhz.len() || sigmas.is_some_and(|s| s.len() != od.len()) {
        return Err(Error::arg("od, widths and errors differ in length"));
    }
    if od.len() < 2 {
        return Err(Error::arg("superradiance fit needs at least 2 points"));
    }
    if od.iter().any(|&o| !(o >= 0.0)) {
        return Err(Error::arg("optical densities must be >= 0"));
    }
    if od.iter().all(|&o| o == od[0]) {
        return Err(Error::arg("all optical densities are equal"));
    }
    if !(gamma0_mhz > 0.0) {
        return Err(Error::arg("natural linewidth must be > 0"));
    }
    let weights: Vec<f64> = match sigmas {
        Some(s) => {
            if s.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::arg("width errors must be > 0"));
            }
            s.iter().map(|v| 1.0 / (v * v)).collect()
        }
        None => vec![1.0; od.len()],
    };
    // y − Γ₀ = (Γ₀·OD)·k, a line through the origin
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for ((&o, &y), &w) in od.iter().zip(fwhm_mhz).zip(&weights) {
        let x = gamma0_mhz * o;
        sxx += w * x * x;
        sxy += w * x * (y - gamma0_mhz);
    }
    let k = sxy / sxx;
    let chi2: f64 = od
        .iter()
        .zip(fwhm_mhz)
        .zip(&weights)
        .map(|((&o, &y), &w)| {
            let r = y - gamma0_mhz * (1.0 + k * o);
            w * r * r
        })
        .sum();
    let reduced_chi2 = chi2 / (od.len() - 1) as f64;
    let var = reduced_chi2 / sxx;
    Ok(FitResult {
        names: vec!["k".into()],
        params: vec![k],
        errors: vec![var.sqrt()],
        covariance: vec![vec![var]],
        chi2,
        reduced_chi2,
        iterations: 1,
        converged: true,
        gradient_norm: 2.0 * (sxy - k * sxx).abs(),
    })
}
