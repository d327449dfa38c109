//! Poisson and NB2 log-link count regression with exposure offsets, fitted by
//! IRLS, plus dispersion diagnostics and the media-adjusted excess-risk signal.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::model::{ModelError, MonthIndex, MonthlyPanel, RiskSeries};
use crate::stats;

pub const MAX_ITER: usize = 100;
pub const REL_TOL: f64 = 1e-10;
/// Largest score component accepted at convergence.
pub const SCORE_TOL: f64 = 1e-8;
pub const MIN_ROWS: usize = 10;
pub const EXCESS_EPSILON: f64 = 0.5;
pub const OVERDISPERSION_CUT: f64 = 1.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmError {
    #[error("design matrix is singular: {0}")]
    SingularDesign(String),
    #[error("response is zero in every month")]
    AllZeroResponse,
    #[error("need at least {need} usable months, got {got}")]
    InsufficientData { need: usize, got: usize },
    #[error("dispersion alpha must be positive, got {0}")]
    InvalidAlpha(f64),
    #[error("panel has no media index")]
    MissingMedia,
    #[error("fits were estimated on different data")]
    DesignMismatch,
    #[error("every grid point failed to fit")]
    EmptyGrid,
    #[error("vector length mismatch")]
    LengthMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum CountFamily {
    Poisson,
    /// NB2: Var = mu + alpha * mu^2, alpha held fixed.
    NegBin { alpha: f64 },
}

impl CountFamily {
    fn alpha(self) -> f64 {
        match self {
            Self::Poisson => 0.0,
            Self::NegBin { alpha } => alpha,
        }
    }

    fn variance(self, mu: f64) -> f64 {
        mu + self.alpha() * mu * mu
    }

    fn validate(self) -> Result<(), GlmError> {
        match self {
            Self::NegBin { alpha } if !(alpha > 0.0) || !alpha.is_finite() => Err(GlmError::InvalidAlpha(alpha)),
            _ => Ok(()),
        }
    }

    /// Log-likelihood of integer-valued `y` at mean `mu`.
    pub fn loglik(self, y: f64, mu: f64) -> f64 {
        match self {
            Self::Poisson => y * mu.ln() - mu - ln_gamma(y + 1.0),
            Self::NegBin { alpha } => {
                let r = 1.0 / alpha;
                // sum_{j<y} ln(r + j) - y ln(r + mu), written to stay accurate as r grows.
                let ratio: f64 = (0..y as u64).map(|j| ((j as f64 - mu) / (r + mu)).ln_1p()).sum();
                let y_term = if y > 0.0 { y * mu.ln() } else { 0.0 };
                ratio + y_term - ln_gamma(y + 1.0) - r * (mu / r).ln_1p()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Formula {
    pub time_linear: bool,
    pub time_quadratic: bool,
    pub media: bool,
    /// Log-exposure offset.
    pub offset: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMeta {
    pub formula: Formula,
    /// Mean and population sd of the month position over fitted rows.
    pub time_center: f64,
    pub time_scale: f64,
    pub media_mean: Option<f64>,
    pub media_sd: Option<f64>,
    /// Months dropped for missing or zero exposure.
    pub excluded_months: Vec<MonthIndex>,
    pub variance_function: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountModelFit {
    pub family: CountFamily,
    pub terms: Vec<String>,
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub z_values: Vec<f64>,
    pub p_values: Vec<f64>,
    pub rate_ratios: Vec<f64>,
    pub loglik: f64,
    pub pearson_chi2: f64,
    pub df_resid: usize,
    pub pearson_dispersion: f64,
    pub iterations: usize,
    pub converged: bool,
    pub months: Vec<MonthIndex>,
    /// Rounded response used in the likelihood.
    pub y: Vec<f64>,
    /// Unrounded nowcast counts, kept for the excess-risk signal.
    pub y_unrounded: Vec<f64>,
    pub fitted: Vec<f64>,
    /// Exposure per fitted month; 1 when no offset is used.
    pub exposure: Vec<f64>,
    pub design_meta: DesignMeta,
}

/// One row of a coefficient table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermRow {
    pub term: String,
    pub estimate: f64,
    pub se: f64,
    pub rate_ratio: f64,
    pub p: f64,
}

impl CountModelFit {
    pub fn term_rows(&self) -> Vec<TermRow> {
        (0..self.terms.len())
            .map(|k| TermRow {
                term: self.terms[k].clone(),
                estimate: self.coefficients[k],
                se: self.standard_errors[k],
                rate_ratio: self.rate_ratios[k],
                p: self.p_values[k],
            })
            .collect()
    }

    pub fn coefficient(&self, term: &str) -> Option<f64> {
        self.terms.iter().position(|t| t == term).map(|k| self.coefficients[k])
    }
}

/// Result of the core IRLS solve on an explicit design.
#[derive(Debug, Clone, PartialEq)]
pub struct IrlsResult {
    pub beta: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub fitted: Vec<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn total_loglik(family: CountFamily, y: &[f64], mu: &[f64]) -> f64 {
    y.iter().zip(mu).map(|(&yi, &mi)| family.loglik(yi, mi)).sum()
}

fn linear_predictor(x: &DMatrix<f64>, beta: &DVector<f64>, offset: &[f64]) -> Vec<f64> {
    let eta = x * beta;
    eta.iter().zip(offset).map(|(e, o)| (e + o).exp()).collect()
}

/// Gradient of the log-likelihood with respect to the coefficients.
pub fn score(x: &DMatrix<f64>, y: &[f64], mu: &[f64], family: CountFamily) -> DVector<f64> {
    let alpha = family.alpha();
    let r = DVector::from_iterator(y.len(), y.iter().zip(mu).map(|(yi, mi)| (yi - mi) / (1.0 + alpha * mi)));
    x.transpose() * r
}

/// IRLS for a log link. `x` must include the intercept column first.
pub fn irls(
    x: &DMatrix<f64>,
    y: &[f64],
    offset: &[f64],
    family: CountFamily,
) -> Result<IrlsResult, GlmError> {
    family.validate()?;
    let (n, p) = x.shape();
    if y.len() != n || offset.len() != n {
        return Err(GlmError::LengthMismatch);
    }
    if y.iter().all(|&v| v == 0.0) {
        return Err(GlmError::AllZeroResponse);
    }
    let alpha = family.alpha();
    let mean_y = stats::mean(y);
    let mean_e = offset.iter().map(|o| o.exp()).sum::<f64>() / n as f64;
    let mut beta = DVector::zeros(p);
    beta[0] = (mean_y / mean_e).ln();
    let mut mu = linear_predictor(x, &beta, offset);
    let mut ll = total_loglik(family, y, &mu);
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=MAX_ITER {
        iterations = it;
        let w: Vec<f64> = mu.iter().map(|m| m / (1.0 + alpha * m)).collect();
        let z: Vec<f64> = (0..n).map(|i| mu[i].ln() - offset[i] + (y[i] - mu[i]) / mu[i]).collect();
        let mut xtwx = DMatrix::<f64>::zeros(p, p);
        let mut xtwz = DVector::<f64>::zeros(p);
        for i in 0..n {
            let row = x.row(i);
            for a in 0..p {
                xtwz[a] += row[a] * w[i] * z[i];
                for b in 0..=a {
                    xtwx[(a, b)] += row[a] * w[i] * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtwx[(b, a)] = xtwx[(a, b)];
            }
        }
        let chol = xtwx
            .cholesky()
            .ok_or_else(|| GlmError::SingularDesign("weighted cross-product is not positive definite".into()))?;
        let target = chol.solve(&xtwz);
        // Step halving guards against overshoot far from the optimum.
        let mut step = 1.0;
        let (mut new_beta, mut new_mu, mut new_ll);
        loop {
            new_beta = &beta + (&target - &beta) * step;
            new_mu = linear_predictor(x, &new_beta, offset);
            new_ll = total_loglik(family, y, &new_mu);
            if new_ll.is_finite() && new_ll >= ll - 1e-12 * ll.abs() || step < 1e-6 {
                break;
            }
            step *= 0.5;
        }
        let change = (new_ll - ll).abs();
        beta = new_beta;
        mu = new_mu;
        let prev = ll;
        ll = new_ll;
        if change <= REL_TOL * prev.abs().max(1.0) && score(x, y, &mu, family).amax() <= SCORE_TOL {
            converged = true;
            break;
        }
    }

    let covariance = observed_information(x, y, &mu, alpha)
        .try_inverse()
        .ok_or_else(|| GlmError::SingularDesign("information matrix is not invertible".into()))?;
    Ok(IrlsResult { beta: beta.iter().copied().collect(), covariance, fitted: mu, loglik: ll, iterations, converged })
}

/// Negative Hessian of the log-likelihood in the coefficients.
fn observed_information(x: &DMatrix<f64>, y: &[f64], mu: &[f64], alpha: f64) -> DMatrix<f64> {
    let (n, p) = x.shape();
    let mut info = DMatrix::<f64>::zeros(p, p);
    for i in 0..n {
        let d = mu[i] * (1.0 + alpha * y[i]) / (1.0 + alpha * mu[i]).powi(2);
        let row = x.row(i);
        for a in 0..p {
            for b in 0..p {
                info[(a, b)] += row[a] * d * row[b];
            }
        }
    }
    info
}

/// Design matrix, response and offset assembled from a panel.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub terms: Vec<String>,
    pub rows: Vec<usize>,
    pub y: Vec<f64>,
    pub y_unrounded: Vec<f64>,
    pub offset: Vec<f64>,
    pub meta: DesignMeta,
}

pub fn build_design(panel: &MonthlyPanel, formula: Formula) -> Result<Design, GlmError> {
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for i in 0..panel.len() {
        if formula.offset && !panel.exposure[i].is_some_and(|e| e > 0.0) {
            excluded.push(panel.months[i]);
        } else {
            rows.push(i);
        }
    }
    if rows.len() < MIN_ROWS {
        return Err(GlmError::InsufficientData { need: MIN_ROWS, got: rows.len() });
    }
    let t: Vec<f64> = rows.iter().map(|&i| i as f64).collect();
    let time_center = stats::mean(&t);
    let time_scale = stats::population_variance(&t).sqrt();
    let ts: Vec<f64> = t.iter().map(|v| (v - time_center) / time_scale).collect();

    let mut columns: Vec<(String, Vec<f64>)> = vec![("intercept".into(), vec![1.0; rows.len()])];
    if formula.time_linear {
        columns.push(("time_linear".into(), ts.clone()));
    }
    if formula.time_quadratic {
        columns.push(("time_quadratic".into(), ts.iter().map(|v| v * v).collect()));
    }
    let (mut media_mean, mut media_sd) = (None, None);
    if formula.media {
        let media = panel.media_index.as_ref().ok_or(GlmError::MissingMedia)?;
        let vals: Vec<f64> = rows.iter().map(|&i| media[i]).collect();
        let mean = stats::mean(&vals);
        let sd = stats::population_variance(&vals).sqrt();
        if !(sd > 0.0) {
            return Err(GlmError::SingularDesign("media index is constant over fitted months".into()));
        }
        media_mean = Some(mean);
        media_sd = Some(sd);
        columns.push(("media_std".into(), vals.iter().map(|v| (v - mean) / sd).collect()));
    }

    let x = DMatrix::from_fn(rows.len(), columns.len(), |r, c| columns[c].1[r]);
    let y_unrounded: Vec<f64> = rows.iter().map(|&i| panel.nowcast_count[i]).collect();
    let y = y_unrounded.iter().map(|v| v.round()).collect();
    let offset = rows
        .iter()
        .map(|&i| if formula.offset { panel.exposure[i].unwrap_or(1.0).ln() } else { 0.0 })
        .collect();
    Ok(Design {
        x,
        terms: columns.into_iter().map(|(n, _)| n).collect(),
        rows,
        y,
        y_unrounded,
        offset,
        meta: DesignMeta {
            formula,
            time_center,
            time_scale,
            media_mean,
            media_sd,
            excluded_months: excluded,
            variance_function: "mu + alpha * mu^2".into(),
        },
    })
}

pub fn fit_count_model(
    panel: &MonthlyPanel,
    formula: Formula,
    family: CountFamily,
) -> Result<CountModelFit, GlmError> {
    let design = build_design(panel, formula)?;
    fit_design(&design, panel, family)
}

fn fit_design(design: &Design, panel: &MonthlyPanel, family: CountFamily) -> Result<CountModelFit, GlmError> {
    let res = irls(&design.x, &design.y, &design.offset, family)?;
    let p = res.beta.len();
    let se: Vec<f64> = (0..p).map(|k| res.covariance[(k, k)].max(0.0).sqrt()).collect();
    let z: Vec<f64> = (0..p).map(|k| res.beta[k] / se[k]).collect();
    let pearson_chi2: f64 =
        design.y.iter().zip(&res.fitted).map(|(y, m)| (y - m).powi(2) / family.variance(*m)).sum();
    let df_resid = design.rows.len().saturating_sub(p);
    Ok(CountModelFit {
        family,
        terms: design.terms.clone(),
        rate_ratios: res.beta.iter().map(|b| b.exp()).collect(),
        p_values: z.iter().map(|&v| stats::normal_two_sided_p(v)).collect(),
        coefficients: res.beta,
        standard_errors: se,
        z_values: z,
        loglik: res.loglik,
        pearson_chi2,
        df_resid,
        pearson_dispersion: if df_resid > 0 { pearson_chi2 / df_resid as f64 } else { f64::NAN },
        iterations: res.iterations,
        converged: res.converged,
        months: design.rows.iter().map(|&i| panel.months[i]).collect(),
        y: design.y.clone(),
        y_unrounded: design.y_unrounded.clone(),
        exposure: design.offset.iter().map(|o| o.exp()).collect(),
        fitted: res.fitted,
        design_meta: design.meta.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispersionDiagnostics {
    pub pearson_ratio: f64,
    pub overdispersion_flag: bool,
}

pub fn dispersion_diagnostics(fit: &CountModelFit) -> DispersionDiagnostics {
    DispersionDiagnostics {
        pearson_ratio: fit.pearson_dispersion,
        overdispersion_flag: fit.pearson_dispersion > OVERDISPERSION_CUT,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub loglik: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaGrid {
    pub alpha_star: f64,
    pub curve: Vec<AlphaPoint>,
}

/// Refits at every alpha and returns the log-likelihood maximizer.
/// Points that fail to fit are kept in the curve with their error.
pub fn alpha_grid_search(panel: &MonthlyPanel, formula: Formula, grid: &[f64]) -> Result<AlphaGrid, GlmError> {
    if let Some(&bad) = grid.iter().find(|a| !(**a > 0.0)) {
        return Err(GlmError::InvalidAlpha(bad));
    }
    let design = build_design(panel, formula)?;
    let curve: Vec<AlphaPoint> = grid
        .par_iter()
        .map(|&alpha| match irls(&design.x, &design.y, &design.offset, CountFamily::NegBin { alpha }) {
            Ok(r) => AlphaPoint { alpha, loglik: Some(r.loglik), converged: r.converged, error: None },
            Err(e) => AlphaPoint { alpha, loglik: None, converged: false, error: Some(e.to_string()) },
        })
        .collect();
    let best = curve
        .iter()
        .filter_map(|p| p.loglik.map(|l| (p.alpha, l)))
        .fold(None, |acc: Option<(f64, f64)>, (a, l)| match acc {
            Some((_, bl)) if bl >= l => acc,
            _ => Some((a, l)),
        })
        .ok_or(GlmError::EmptyGrid)?;
    Ok(AlphaGrid { alpha_star: best.0, curve })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodRatio {
    pub statistic: f64,
    /// From the boundary mixture 0.5 chi2(0) + 0.5 chi2(1).
    pub p_value: f64,
    /// The raw statistic was negative and was clamped to zero.
    pub clamped: bool,
}

pub fn likelihood_ratio_poisson_vs_nb(poisson_loglik: f64, nb_loglik: f64) -> LikelihoodRatio {
    let raw = 2.0 * (nb_loglik - poisson_loglik);
    let clamped = raw < 0.0;
    let statistic = raw.max(0.0);
    let p_value = if statistic == 0.0 { 0.5 } else { 0.5 * stats::chi2_sf(statistic, 1.0) };
    LikelihoodRatio { statistic, p_value, clamped }
}

pub fn likelihood_ratio_test(poisson: &CountModelFit, nb: &CountModelFit) -> Result<LikelihoodRatio, GlmError> {
    if poisson.months != nb.months || poisson.terms != nb.terms || poisson.y != nb.y {
        return Err(GlmError::DesignMismatch);
    }
    Ok(likelihood_ratio_poisson_vs_nb(poisson.loglik, nb.loglik))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcessRiskSignal {
    pub months: Vec<MonthIndex>,
    /// log((y + eps) / E) - log((mu + eps) / E).
    pub excess: Vec<f64>,
    pub epsilon: f64,
    /// `None` when the excess series is constant.
    pub standardized: Option<RiskSeries>,
    pub degenerate: bool,
}

pub fn excess_risk(fit: &CountModelFit, epsilon: f64) -> Result<ExcessRiskSignal, GlmError> {
    let excess: Vec<f64> = (0..fit.fitted.len())
        .map(|i| {
            let e = fit.exposure[i];
            ((fit.y_unrounded[i] + epsilon) / e).ln() - ((fit.fitted[i] + epsilon) / e).ln()
        })
        .collect();
    let (standardized, degenerate) = match RiskSeries::from_signal(fit.months.clone(), &excess) {
        Ok(r) => (Some(r), false),
        Err(ModelError::ZeroVariance) => (None, true),
        Err(_) => return Err(GlmError::InsufficientData { need: 2, got: excess.len() }),
    };
    Ok(ExcessRiskSignal { months: fit.months.clone(), excess, epsilon, standardized, degenerate })
}
