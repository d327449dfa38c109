//! ARIMA(p,d,q) fitting by conditional sum of squares refined on the exact
//! Kalman-filter likelihood, AIC grid selection, an augmented Dickey-Fuller
//! check and forecast bands mapped to projected phases.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phases::{classify_six, Phase6, PhaseThresholds};
use crate::stats;

pub const Z95: f64 = 1.96;
pub const DEFAULT_HORIZON: usize = 12;
const LM_MAX_ITER: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForecastError {
    #[error("series too short: need {need} observations, got {got}")]
    SeriesTooShort { need: usize, got: usize },
    #[error("series contains a non-finite value")]
    NonFinite,
    #[error("order grid is empty")]
    EmptyGrid,
    #[error("every order in the grid failed to fit")]
    AllFitsFailed,
    #[error("least-squares system is singular")]
    Singular,
    #[error("starting values give a non-stationary model")]
    NonStationaryStart,
    #[error("forecast context sd must be positive, got {0}")]
    InvalidContext(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl ArimaOrder {
    pub const fn new(p: usize, d: usize, q: usize) -> Self {
        Self { p, d, q }
    }

    /// Same d and one step away in p or q.
    pub fn is_adjacent(self, other: ArimaOrder) -> bool {
        self.d == other.d && self.p.abs_diff(other.p) + self.q.abs_diff(other.q) == 1
    }
}

impl fmt::Display for ArimaOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ARIMA({},{},{})", self.p, self.d, self.q)
    }
}

/// Eight d=1 orders plus the stationary AR(1).
pub fn default_grid() -> Vec<ArimaOrder> {
    vec![
        ArimaOrder::new(1, 0, 0),
        ArimaOrder::new(1, 1, 0),
        ArimaOrder::new(0, 1, 1),
        ArimaOrder::new(1, 1, 1),
        ArimaOrder::new(2, 1, 0),
        ArimaOrder::new(0, 1, 2),
        ArimaOrder::new(2, 1, 1),
        ArimaOrder::new(1, 1, 2),
        ArimaOrder::new(2, 1, 2),
    ]
}

pub fn difference(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for _ in 0..d {
        out = out.windows(2).map(|w| w[1] - w[0]).collect();
    }
    out
}

/// Inverts `difference` for forecasts appended after `history`.
pub fn integrate(history: &[f64], d: usize, diffed_forecast: &[f64]) -> Vec<f64> {
    if d == 0 {
        return diffed_forecast.to_vec();
    }
    let inner = integrate(&difference(history, 1), d - 1, diffed_forecast);
    let mut level = *history.last().expect("history non-empty");
    inner
        .iter()
        .map(|dx| {
            level += dx;
            level
        })
        .collect()
}

/// True when all roots of `1 - c1 z - ... - ck z^k` lie outside the unit circle.
fn roots_outside(coeffs: &[f64]) -> bool {
    let k = coeffs.len();
    if k == 0 {
        return true;
    }
    let mut companion = DMatrix::<f64>::zeros(k, k);
    for (j, &c) in coeffs.iter().enumerate() {
        companion[(0, j)] = c;
    }
    for i in 1..k {
        companion[(i, i - 1)] = 1.0;
    }
    companion.complex_eigenvalues().iter().all(|z| z.norm() < 1.0 - 1e-9)
}

pub fn is_stationary(ar: &[f64]) -> bool {
    roots_outside(ar)
}

/// MA polynomial `1 + t1 z + ...` is invertible.
pub fn is_invertible(ma: &[f64]) -> bool {
    let neg: Vec<f64> = ma.iter().map(|t| -t).collect();
    roots_outside(&neg)
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    p: usize,
    q: usize,
    constant: bool,
}

impl Layout {
    fn split<'a>(&self, b: &'a [f64]) -> (&'a [f64], &'a [f64], f64) {
        let c = if self.constant { b[self.p + self.q] } else { 0.0 };
        (&b[..self.p], &b[self.p..self.p + self.q], c)
    }

    fn len(&self) -> usize {
        self.p + self.q + usize::from(self.constant)
    }
}

fn css_residuals(w: &[f64], lay: Layout, b: &[f64]) -> Option<Vec<f64>> {
    let (ar, ma, c) = lay.split(b);
    let n = w.len();
    let mut eps = vec![0.0; n];
    for t in lay.p..n {
        let mut e = w[t] - c;
        for (i, &phi) in ar.iter().enumerate() {
            e -= phi * (w[t - i - 1] - c);
        }
        for (j, &theta) in ma.iter().enumerate() {
            if t > j {
                e -= theta * eps[t - j - 1];
            }
        }
        eps[t] = e;
    }
    let out = eps[lay.p..].to_vec();
    out.iter().all(|v| v.is_finite() && v.abs() < 1e150).then_some(out)
}

struct KalmanOutput {
    v: Vec<f64>,
    f: Vec<f64>,
    state: DVector<f64>,
    transition: DMatrix<f64>,
}

fn state_space(ar: &[f64], ma: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let r = ar.len().max(ma.len() + 1);
    let mut t = DMatrix::<f64>::zeros(r, r);
    for (i, &phi) in ar.iter().enumerate() {
        t[(i, 0)] = phi;
    }
    for i in 0..r - 1 {
        t[(i, i + 1)] = 1.0;
    }
    let mut rv = DVector::<f64>::zeros(r);
    rv[0] = 1.0;
    for (j, &theta) in ma.iter().enumerate() {
        rv[j + 1] = theta;
    }
    (t, rv)
}

/// Exact innovations for unit innovation variance.
fn kalman(w: &[f64], ar: &[f64], ma: &[f64], c: f64) -> Option<KalmanOutput> {
    if !is_stationary(ar) {
        return None;
    }
    let (t, rv) = state_space(ar, ma);
    let r = t.nrows();
    let rr = &rv * rv.transpose();
    let lhs = DMatrix::<f64>::identity(r * r, r * r) - t.kronecker(&t);
    let vec_p = lhs.lu().solve(&DVector::from_column_slice(rr.as_slice()))?;
    let mut p = DMatrix::from_column_slice(r, r, vec_p.as_slice());
    p = 0.5 * (&p + p.transpose());
    let mut a = DVector::<f64>::zeros(r);
    let mut v = Vec::with_capacity(w.len());
    let mut f = Vec::with_capacity(w.len());
    for &y in w {
        let ft = p[(0, 0)];
        if !(ft > 0.0) || !ft.is_finite() {
            return None;
        }
        let vt = y - c - a[0];
        let tp = &t * &p;
        let k = tp.column(0) / ft;
        a = &t * &a + &k * vt;
        p = &tp * t.transpose() + &rr - &k * k.transpose() * ft;
        p = 0.5 * (&p + p.transpose());
        v.push(vt);
        f.push(ft);
    }
    Some(KalmanOutput { v, f, state: a, transition: t })
}

/// Residuals whose sum of squares is a monotone transform of the concentrated exact likelihood.
fn exact_residuals(w: &[f64], lay: Layout, b: &[f64]) -> Option<Vec<f64>> {
    let (ar, ma, c) = lay.split(b);
    let out = kalman(w, ar, ma, c)?;
    let n = w.len() as f64;
    let scale = (out.f.iter().map(|f| f.ln()).sum::<f64>() / n / 2.0).exp();
    let r: Vec<f64> = out.v.iter().zip(&out.f).map(|(v, f)| v / f.sqrt() * scale).collect();
    r.iter().all(|x| x.is_finite()).then_some(r)
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

/// Levenberg-Marquardt on a residual vector with a finite-difference Jacobian.
fn levenberg_marquardt<F>(f: F, x0: Vec<f64>) -> Option<(Vec<f64>, usize, bool)>
where
    F: Fn(&[f64]) -> Option<Vec<f64>>,
{
    let mut x = x0;
    let mut r = f(&x)?;
    let mut ss = sum_sq(&r);
    let k = x.len();
    if k == 0 {
        return Some((x, 0, true));
    }
    let mut lambda = 1e-3;
    for iter in 1..=LM_MAX_ITER {
        let m = r.len();
        let mut jac = DMatrix::<f64>::zeros(m, k);
        for j in 0..k {
            let h = 1e-6 * (1.0 + x[j].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let col: Vec<f64> = match (f(&xp), f(&xm)) {
                (Some(rp), Some(rm)) => rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect(),
                (Some(rp), None) => rp.iter().zip(&r).map(|(a, b)| (a - b) / h).collect(),
                (None, Some(rm)) => r.iter().zip(&rm).map(|(a, b)| (a - b) / h).collect(),
                (None, None) => vec![0.0; m],
            };
            jac.set_column(j, &DVector::from_vec(col));
        }
        let rv = DVector::from_column_slice(&r);
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &rv;
        if g.amax() < 1e-10 * (1.0 + ss) {
            return Some((x, iter, true));
        }
        let mut accepted = false;
        while lambda < 1e12 {
            let mut a = jtj.clone();
            for i in 0..k {
                a[(i, i)] += lambda * (jtj[(i, i)] + 1e-12);
            }
            let Some(step) = a.lu().solve(&(-&g)) else {
                lambda *= 10.0;
                continue;
            };
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            if let Some(rc) = f(&cand) {
                let sc = sum_sq(&rc);
                if sc <= ss {
                    let small = ss - sc <= 1e-14 * (1.0 + ss) && step.amax() <= 1e-9 * (1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs())));
                    x = cand;
                    r = rc;
                    ss = sc;
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    if small {
                        return Some((x, iter, true));
                    }
                    break;
                }
            }
            lambda *= 4.0;
        }
        if !accepted {
            // No descent direction left at any damping: a stationary point.
            return Some((x, iter, true));
        }
    }
    Some((x, LM_MAX_ITER, false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArimaFit {
    pub order: ArimaOrder,
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
    pub constant: Option<f64>,
    pub sigma2: f64,
    pub loglik: f64,
    pub aic: f64,
    pub n_params: usize,
    pub n_used: usize,
    pub residuals: Vec<f64>,
    pub stationary: bool,
    pub invertible: bool,
    pub converged: bool,
    pub iterations: usize,
    #[serde(default, skip_serializing)]
    pub series: Vec<f64>,
}

fn min_length(order: ArimaOrder) -> usize {
    order.d + order.p + order.q + 6
}

pub fn arima_fit(series: &[f64], order: ArimaOrder) -> Result<ArimaFit, ForecastError> {
    if series.iter().any(|v| !v.is_finite()) {
        return Err(ForecastError::NonFinite);
    }
    let need = min_length(order);
    if series.len() < need {
        return Err(ForecastError::SeriesTooShort { need, got: series.len() });
    }
    let w = difference(series, order.d);
    let lay = Layout { p: order.p, q: order.q, constant: order.d == 0 };
    let mut start = vec![0.0; lay.len()];
    if lay.constant {
        start[lay.p + lay.q] = stats::mean(&w);
    }
    let (css, css_iter, _) = levenberg_marquardt(|b| css_residuals(&w, lay, b), start.clone()).ok_or(ForecastError::NonStationaryStart)?;
    let init = if exact_residuals(&w, lay, &css).is_some() && is_invertible(lay.split(&css).1) { css } else { start };
    let (beta, iters, converged) =
        levenberg_marquardt(|b| exact_residuals(&w, lay, b), init).ok_or(ForecastError::NonStationaryStart)?;
    let (ar, ma, c) = lay.split(&beta);
    let out = kalman(&w, ar, ma, c).ok_or(ForecastError::NonStationaryStart)?;
    let n = w.len() as f64;
    let sigma2 = out.v.iter().zip(&out.f).map(|(v, f)| v * v / f).sum::<f64>() / n;
    let loglik = -0.5 * n * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0) - 0.5 * out.f.iter().map(|f| f.ln()).sum::<f64>();
    let n_params = lay.len() + 1;
    Ok(ArimaFit {
        order,
        stationary: is_stationary(ar),
        invertible: is_invertible(ma),
        ar: ar.to_vec(),
        ma: ma.to_vec(),
        constant: lay.constant.then_some(c),
        sigma2,
        loglik,
        aic: 2.0 * n_params as f64 - 2.0 * loglik,
        n_params,
        n_used: w.len(),
        residuals: out.v,
        converged,
        iterations: css_iter + iters,
        series: series.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AicRow {
    pub order: ArimaOrder,
    pub aic: Option<f64>,
    pub loglik: Option<f64>,
    pub n_params: Option<usize>,
    pub converged: bool,
    pub invertible: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArimaSelection {
    pub best: ArimaFit,
    pub table: Vec<AicRow>,
}

pub fn arima_select(series: &[f64], grid: &[ArimaOrder]) -> Result<ArimaSelection, ForecastError> {
    if grid.is_empty() {
        return Err(ForecastError::EmptyGrid);
    }
    let fits: Vec<Result<ArimaFit, ForecastError>> = grid.par_iter().map(|&o| arima_fit(series, o)).collect();
    let table = grid
        .iter()
        .zip(&fits)
        .map(|(&order, r)| match r {
            Ok(f) => AicRow {
                order,
                aic: Some(f.aic),
                loglik: Some(f.loglik),
                n_params: Some(f.n_params),
                converged: f.converged,
                invertible: f.invertible,
                error: None,
            },
            Err(e) => AicRow {
                order,
                aic: None,
                loglik: None,
                n_params: None,
                converged: false,
                invertible: false,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let best = fits
        .into_iter()
        .flatten()
        .min_by(|a, b| a.aic.total_cmp(&b.aic))
        .ok_or(ForecastError::AllFitsFailed)?;
    Ok(ArimaSelection { best, table })
}

/// MA(infinity) weights of the integrated model.
pub fn psi_weights(ar: &[f64], ma: &[f64], d: usize, h: usize) -> Vec<f64> {
    let mut psi = vec![0.0; h];
    for j in 0..h {
        let mut v = if j == 0 { 1.0 } else { ma.get(j - 1).copied().unwrap_or(0.0) };
        for (i, &phi) in ar.iter().enumerate() {
            if j > i {
                v += phi * psi[j - i - 1];
            }
        }
        psi[j] = v;
    }
    for _ in 0..d {
        let mut acc = 0.0;
        for v in psi.iter_mut() {
            acc += *v;
            *v = acc;
        }
    }
    psi
}

/// Maps forecast values onto the risk scale used by the phase rules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastContext {
    pub mean: f64,
    pub sd: f64,
    /// When set, a non-positive point forecast counts as no evidenced occurrence.
    pub series_is_count: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastBand {
    pub horizon: usize,
    pub point: Vec<f64>,
    pub lower95: Vec<f64>,
    pub upper95: Vec<f64>,
    pub half_width: Vec<f64>,
    pub risk_z: Vec<f64>,
    pub projected_phase: Vec<Phase6>,
    pub negative_lower: bool,
    pub warnings: Vec<String>,
}

pub fn forecast(fit: &ArimaFit, horizon: usize, th: &PhaseThresholds, ctx: &ForecastContext) -> Result<ForecastBand, ForecastError> {
    if !(ctx.sd > 0.0) {
        return Err(ForecastError::InvalidContext(ctx.sd));
    }
    let w = difference(&fit.series, fit.order.d);
    let c = fit.constant.unwrap_or(0.0);
    let out = kalman(&w, &fit.ar, &fit.ma, c).ok_or(ForecastError::NonStationaryStart)?;
    let mut state = out.state;
    let mut diffed = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        diffed.push(c + state[0]);
        state = &out.transition * state;
    }
    let point = integrate(&fit.series, fit.order.d, &diffed);
    let psi = psi_weights(&fit.ar, &fit.ma, fit.order.d, horizon);
    let mut cum = 0.0;
    let half_width: Vec<f64> = psi
        .iter()
        .map(|p| {
            cum += p * p;
            Z95 * (fit.sigma2 * cum).sqrt()
        })
        .collect();
    let lower95: Vec<f64> = point.iter().zip(&half_width).map(|(p, h)| p - h).collect();
    let upper95: Vec<f64> = point.iter().zip(&half_width).map(|(p, h)| p + h).collect();
    let risk_z: Vec<f64> = point.iter().map(|p| (p - ctx.mean) / ctx.sd).collect();
    let projected_phase = point
        .iter()
        .zip(&risk_z)
        .map(|(&p, &z)| {
            let count = if ctx.series_is_count && p <= 0.0 { 0.0 } else { 1.0 };
            classify_six(count, z, 0.0, th).unwrap_or(Phase6::NoEvidencedOccurrence)
        })
        .collect();
    let negative_lower = lower95.iter().any(|&l| l < 0.0);
    let mut warnings = Vec::new();
    if negative_lower && ctx.series_is_count {
        warnings.push("lower band includes negative counts".to_string());
    }
    if !fit.invertible {
        warnings.push("fitted MA polynomial is not invertible".to_string());
    }
    Ok(ForecastBand { horizon, point, lower95, upper95, half_width, risk_z, projected_phase, negative_lower, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PBand {
    #[serde(rename = "<0.01")]
    Below01,
    #[serde(rename = "<0.05")]
    Below05,
    #[serde(rename = "<0.10")]
    Below10,
    #[serde(rename = ">=0.10")]
    AtLeast10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdfResult {
    pub tau: f64,
    pub lag: usize,
    pub n: usize,
    pub critical_1: f64,
    pub critical_5: f64,
    pub critical_10: f64,
    pub p_band: PBand,
}

const ADF_TABLE: [(f64, [f64; 3]); 5] = [
    (25.0, [-3.75, -3.00, -2.63]),
    (50.0, [-3.58, -2.93, -2.60]),
    (100.0, [-3.51, -2.89, -2.58]),
    (250.0, [-3.46, -2.88, -2.57]),
    (500.0, [-3.44, -2.87, -2.57]),
];
const ADF_ASYMPTOTIC: [f64; 3] = [-3.43, -2.86, -2.57];

/// Constant-only critical values, linear in n and in 1/n beyond the table.
pub fn adf_critical_values(n: usize) -> [f64; 3] {
    let x = n as f64;
    if x <= ADF_TABLE[0].0 {
        return ADF_TABLE[0].1;
    }
    for w in ADF_TABLE.windows(2) {
        let (x0, c0) = w[0];
        let (x1, c1) = w[1];
        if x <= x1 {
            let t = (x - x0) / (x1 - x0);
            return [0, 1, 2].map(|i| c0[i] + t * (c1[i] - c0[i]));
        }
    }
    let (x0, c0) = ADF_TABLE[ADF_TABLE.len() - 1];
    let t = 1.0 - x0 / x;
    [0, 1, 2].map(|i| c0[i] + t * (ADF_ASYMPTOTIC[i] - c0[i]))
}

pub fn default_adf_lag(n: usize) -> usize {
    ((n.saturating_sub(1)) as f64).cbrt().floor() as usize
}

/// Regression of the first difference on a constant, the lagged level and `lag` lagged differences.
pub fn adf_test(series: &[f64], max_lag: Option<usize>) -> Result<AdfResult, ForecastError> {
    if series.iter().any(|v| !v.is_finite()) {
        return Err(ForecastError::NonFinite);
    }
    let n = series.len();
    let lag = max_lag.unwrap_or_else(|| default_adf_lag(n));
    let k = lag + 2;
    let need = lag + k + 6;
    if n < need {
        return Err(ForecastError::SeriesTooShort { need, got: n });
    }
    let dy = difference(series, 1);
    let rows = dy.len() - lag;
    let mut x = DMatrix::<f64>::zeros(rows, k);
    let mut y = DVector::<f64>::zeros(rows);
    for r in 0..rows {
        let t = r + lag;
        y[r] = dy[t];
        x[(r, 0)] = 1.0;
        x[(r, 1)] = series[t];
        for i in 1..=lag {
            x[(r, 1 + i)] = dy[t - i];
        }
    }
    let xtx = x.transpose() * &x;
    let inv = xtx.try_inverse().ok_or(ForecastError::Singular)?;
    let beta = &inv * x.transpose() * &y;
    let resid = &y - &x * &beta;
    let s2 = resid.norm_squared() / (rows - k) as f64;
    let se = (s2 * inv[(1, 1)]).sqrt();
    let tau = beta[1] / se;
    let [c1, c5, c10] = adf_critical_values(n);
    let p_band = if tau < c1 {
        PBand::Below01
    } else if tau < c5 {
        PBand::Below05
    } else if tau < c10 {
        PBand::Below10
    } else {
        PBand::AtLeast10
    };
    Ok(AdfResult { tau, lag, n, critical_1: c1, critical_5: c5, critical_10: c10, p_band })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn simulate(seed: u64, ar: &[f64], ma: &[f64], d: usize, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norm = Normal::new(0.0, 1.0).unwrap();
        let burn = 200;
        let mut w = vec![0.0; n + burn];
        let mut e = vec![0.0; n + burn];
        for t in 0..n + burn {
            e[t] = norm.sample(&mut rng);
            let mut v = e[t];
            for (i, &phi) in ar.iter().enumerate() {
                if t > i {
                    v += phi * w[t - i - 1];
                }
            }
            for (j, &theta) in ma.iter().enumerate() {
                if t > j {
                    v += theta * e[t - j - 1];
                }
            }
            w[t] = v;
        }
        let mut x = w[burn..].to_vec();
        for _ in 0..d {
            let mut acc = 10.0;
            x = x
                .iter()
                .map(|v| {
                    acc += v;
                    acc
                })
                .collect();
        }
        x
    }

    #[test]
    fn white_noise_closed_form() {
        let x = simulate(1, &[], &[], 0, 200);
        let fit = arima_fit(&x, ArimaOrder::new(0, 0, 0)).unwrap();
        let m = stats::mean(&x);
        assert!((fit.constant.unwrap() - m).abs() < 1e-6);
        assert!((fit.sigma2 - stats::population_variance(&x)).abs() < 1e-8);
        assert!((fit.sigma2 / stats::sample_variance(&x) - 1.0).abs() < 0.01);
        let th = PhaseThresholds::new(-0.3, 0.3).unwrap();
        let band = forecast(&fit, 12, &th, &ForecastContext { mean: m, sd: 1.0, series_is_count: false }).unwrap();
        assert!(band.point.iter().all(|p| (p - fit.constant.unwrap()).abs() < 1e-12));
        assert!(band.half_width.iter().all(|h| (h - band.half_width[0]).abs() < 1e-12));
    }

    #[test]
    fn ma1_recovery() {
        let hits = (0..50)
            .filter(|&seed| {
                let x = simulate(seed, &[], &[-0.5], 1, 300);
                let fit = arima_fit(&x, ArimaOrder::new(0, 1, 1)).unwrap();
                (-0.6..=-0.4).contains(&fit.ma[0])
            })
            .count();
        assert!(hits >= 45, "{hits}");
    }

    #[test]
    fn exact_loglik_matches_dense_gaussian() {
        let x = simulate(3, &[0.5], &[0.3], 0, 30);
        let fit = arima_fit(&x, ArimaOrder::new(1, 0, 1)).unwrap();
        let (phi, theta, c, s2) = (fit.ar[0], fit.ma[0], fit.constant.unwrap(), fit.sigma2);
        let n = x.len();
        let g0 = s2 * (1.0 + 2.0 * phi * theta + theta * theta) / (1.0 - phi * phi);
        let g1 = s2 * (1.0 + phi * theta) * (phi + theta) / (1.0 - phi * phi);
        let cov = DMatrix::from_fn(n, n, |i, j| {
            let h = i.abs_diff(j);
            if h == 0 {
                g0
            } else {
                g1 * phi.powi(h as i32 - 1)
            }
        });
        let chol = cov.clone().cholesky().unwrap();
        let dev = DVector::from_iterator(n, x.iter().map(|v| v - c));
        let sol = chol.solve(&dev);
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let ll = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + dev.dot(&sol));
        assert!((ll - fit.loglik).abs() < 1e-6, "{ll} vs {}", fit.loglik);
    }

    #[test]
    fn aic_identity_and_single_grid() {
        let x = simulate(4, &[0.4], &[], 1, 120);
        let sel = arima_select(&x, &default_grid()).unwrap();
        for row in &sel.table {
            if let (Some(aic), Some(ll), Some(k)) = (row.aic, row.loglik, row.n_params) {
                assert!((aic - (2.0 * k as f64 - 2.0 * ll)).abs() < 1e-9);
                let o = row.order;
                assert_eq!(k, o.p + o.q + 1 + usize::from(o.d == 0));
            }
        }
        let one = arima_select(&x, &[ArimaOrder::new(2, 1, 0)]).unwrap();
        assert_eq!(one.best.order, ArimaOrder::new(2, 1, 0));
    }

    #[test]
    fn band_widening_and_integration() {
        let x = simulate(5, &[0.5], &[-0.3], 1, 150);
        let fit = arima_fit(&x, ArimaOrder::new(1, 1, 1)).unwrap();
        let th = PhaseThresholds::new(-0.3, 0.3).unwrap();
        let band = forecast(&fit, 12, &th, &ForecastContext { mean: 0.0, sd: 5.0, series_is_count: false }).unwrap();
        for w in band.half_width.windows(2) {
            assert!(w[1] >= w[0]);
        }
        for i in 0..12 {
            assert!(band.lower95[i] <= band.point[i] && band.point[i] <= band.upper95[i]);
        }
        let mut path = vec![*x.last().unwrap()];
        path.extend(&band.point);
        let diffs = difference(&path, 1);
        let rebuilt = integrate(&x, 1, &diffs);
        for (a, b) in rebuilt.iter().zip(&band.point) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn near_unit_ma_is_flat() {
        let x = simulate(6, &[], &[-0.95], 1, 200);
        let fit = arima_fit(&x, ArimaOrder::new(0, 1, 1)).unwrap();
        assert!(fit.ma[0] < -0.8);
        let th = PhaseThresholds::new(-0.3, 0.3).unwrap();
        let band = forecast(&fit, 12, &th, &ForecastContext { mean: 0.0, sd: 1.0, series_is_count: false }).unwrap();
        assert!(band.point.iter().all(|p| (p - band.point[0]).abs() < 1e-9));
    }

    #[test]
    fn psi_weight_bands_match_monte_carlo() {
        let x = simulate(7, &[0.6], &[-0.4], 1, 200);
        let fit = arima_fit(&x, ArimaOrder::new(1, 1, 1)).unwrap();
        let th = PhaseThresholds::new(-0.3, 0.3).unwrap();
        let band = forecast(&fit, 12, &th, &ForecastContext { mean: 0.0, sd: 1.0, series_is_count: false }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let norm = Normal::new(0.0, fit.sigma2.sqrt()).unwrap();
        let (phi, theta) = (fit.ar[0], fit.ma[0]);
        let paths = 10_000;
        let mut sums = [0.0; 12];
        let mut sq = [0.0; 12];
        for _ in 0..paths {
            // Future shocks only; history is held fixed.
            let (mut w_prev, mut e_prev, mut level) = (0.0, 0.0, 0.0);
            for h in 0..12 {
                let e = norm.sample(&mut rng);
                let w = phi * w_prev + e + theta * e_prev;
                level += w;
                sums[h] += level;
                sq[h] += level * level;
                w_prev = w;
                e_prev = e;
            }
        }
        for h in 0..12 {
            let m = sums[h] / paths as f64;
            let sd = (sq[h] / paths as f64 - m * m).sqrt();
            let rel = (band.half_width[h] / (Z95 * sd) - 1.0).abs();
            assert!(rel < 0.05, "h={h}: rel {rel}");
        }
    }

    #[test]
    fn adf_bands() {
        let rw_hits = (0..30).filter(|&s| adf_test(&simulate(s, &[], &[], 1, 200), None).unwrap().p_band == PBand::AtLeast10).count();
        assert!(rw_hits >= 27, "{rw_hits}");
        let wn_hits = (0..30).filter(|&s| adf_test(&simulate(s, &[], &[], 0, 200), None).unwrap().p_band == PBand::Below01).count();
        assert!(wn_hits >= 27, "{wn_hits}");
        let rw = simulate(99, &[], &[], 1, 200);
        assert_eq!(adf_test(&difference(&rw, 1), None).unwrap().p_band, PBand::Below01);
        assert_eq!(default_adf_lag(200), 5);
        assert_eq!(adf_critical_values(50), [-3.58, -2.93, -2.60]);
        assert!(matches!(adf_test(&[1.0; 5], None), Err(ForecastError::SeriesTooShort { .. })));
    }

    #[test]
    fn adf_regression_matches_direct_ols() {
        let x = simulate(12, &[0.7], &[], 0, 60);
        let res = adf_test(&x, Some(1)).unwrap();
        // Frisch-Waugh: partial out constant and lagged difference, then regress.
        let dy = difference(&x, 1);
        let rows: Vec<(f64, f64, f64)> = (1..dy.len()).map(|t| (dy[t], x[t], dy[t - 1])).collect();
        let n = rows.len() as f64;
        let resid = |f: &dyn Fn(&(f64, f64, f64)) -> f64| -> Vec<f64> {
            let z: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let v: Vec<f64> = rows.iter().map(f).collect();
            let (zm, vm) = (z.iter().sum::<f64>() / n, v.iter().sum::<f64>() / n);
            let b = z.iter().zip(&v).map(|(a, c)| (a - zm) * (c - vm)).sum::<f64>() / z.iter().map(|a| (a - zm).powi(2)).sum::<f64>();
            z.iter().zip(&v).map(|(a, c)| (c - vm) - b * (a - zm)).collect()
        };
        let ry = resid(&|r| r.0);
        let rx = resid(&|r| r.1);
        let gamma = rx.iter().zip(&ry).map(|(a, b)| a * b).sum::<f64>() / rx.iter().map(|a| a * a).sum::<f64>();
        let e: Vec<f64> = ry.iter().zip(&rx).map(|(y, x)| y - gamma * x).collect();
        let s2 = e.iter().map(|v| v * v).sum::<f64>() / (n - 3.0);
        let tau = gamma / (s2 / rx.iter().map(|a| a * a).sum::<f64>()).sqrt();
        assert!((tau - res.tau).abs() < 1e-8);
    }

    #[test]
    fn stationarity_checks() {
        assert!(is_stationary(&[0.5]));
        assert!(!is_stationary(&[1.1]));
        assert!(is_stationary(&[0.5, 0.3]));
        assert!(!is_stationary(&[0.5, 0.6]));
        assert!(is_invertible(&[-0.9]));
        assert!(!is_invertible(&[-1.2]));
        assert_eq!(psi_weights(&[0.5], &[], 0, 4), vec![1.0, 0.5, 0.25, 0.125]);
        assert_eq!(psi_weights(&[], &[-0.5], 1, 3), vec![1.0, 0.5, 0.5]);
    }
}
