//! Reporting-delay distributions and empirical-CDF nowcasting.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;
use thiserror::Error;

use crate::ingest::IncidentRecord;
use crate::model::{MonthIndex, MonthlyPanel};
use crate::stats;

/// Lags longer than five years are treated as data errors.
pub const MAX_LAG_DAYS: i64 = 1826;
/// Replacement for same-day reports before log-scale fitting.
pub const ZERO_LAG_SHIFT: f64 = 0.5;
pub const MIN_FIT_SAMPLES: usize = 10;
const SMALL_SAMPLE: usize = 20;
const SIGMA_FLOOR: f64 = 1e-6;
const DAYS_PER_MONTH: f64 = 30.44;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DelayError {
    #[error("need at least {need} lags to fit, got {got}")]
    InsufficientData { need: usize, got: usize },
    #[error("lag {0} is not positive; shift zero-day lags before fitting")]
    NonPositiveLag(f64),
    #[error("lag list is empty")]
    EmptyLags,
    #[error("as-of month {as_of} precedes the last panel month {last}")]
    AsOfBeforePanelEnd { as_of: MonthIndex, last: MonthIndex },
    #[error("invalid nowcast parameter: {0}")]
    InvalidParameter(String),
}

/// Report lags with exclusion bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LagSample {
    /// Valid lags in days; zeros retained.
    pub days: Vec<f64>,
    /// Calendar-month differences, parallel to `days`.
    pub months: Vec<u32>,
    pub excluded: usize,
    pub total: usize,
}

impl LagSample {
    /// Sample from bare day counts; months are derived from elapsed days.
    pub fn from_days(days: &[f64]) -> Self {
        let months = days.iter().map(|d| (d / DAYS_PER_MONTH).floor() as u32).collect();
        Self { days: days.to_vec(), months, excluded: 0, total: days.len() }
    }

    pub fn excluded_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.excluded as f64 / self.total as f64
        }
    }

    pub fn zero_count(&self) -> usize {
        self.days.iter().filter(|&&d| d == 0.0).count()
    }

    /// Lags with zero-day values replaced by [`ZERO_LAG_SHIFT`].
    pub fn shifted(&self) -> Vec<f64> {
        self.days.iter().map(|&d| if d == 0.0 { ZERO_LAG_SHIFT } else { d }).collect()
    }

    pub fn lag_months(&self, convention: LagMonthConvention) -> Vec<u32> {
        match convention {
            LagMonthConvention::CalendarMonths => self.months.clone(),
            LagMonthConvention::ElapsedDays => {
                self.days.iter().map(|d| (d / DAYS_PER_MONTH).floor() as u32).collect()
            }
        }
    }

    fn push(&mut self, incident: chrono::NaiveDate, report: chrono::NaiveDate) {
        self.total += 1;
        let lag = (report - incident).num_days();
        if !(0..=MAX_LAG_DAYS).contains(&lag) {
            self.excluded += 1;
            return;
        }
        self.days.push(lag as f64);
        let months = MonthIndex::from_date(incident).months_until(MonthIndex::from_date(report));
        self.months.push(months.max(0) as u32);
    }
}

/// One lag per (incident, report) pair.
pub fn compute_lags(records: &[IncidentRecord]) -> LagSample {
    let mut sample = LagSample::default();
    for rec in records {
        for &report in &rec.report_dates {
            sample.push(rec.incident_date, report);
        }
    }
    sample
}

/// One lag per incident, to its earliest report. This is the delay that
/// governs when an incident first becomes countable.
pub fn first_report_lags(records: &[IncidentRecord]) -> LagSample {
    let mut sample = LagSample::default();
    for rec in records {
        sample.push(rec.incident_date, rec.first_report_date());
    }
    sample
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayFamily {
    Lognormal,
    Exponential,
    Weibull,
}

impl DelayFamily {
    pub const ALL: [DelayFamily; 3] = [Self::Lognormal, Self::Exponential, Self::Weibull];

    pub fn n_params(self) -> usize {
        match self {
            Self::Exponential => 1,
            Self::Lognormal | Self::Weibull => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DelayParams {
    /// Parameters of log-days.
    Lognormal { mu: f64, sigma: f64 },
    Exponential { rate: f64 },
    Weibull { shape: f64, scale: f64 },
}

impl DelayParams {
    pub fn mean(&self) -> f64 {
        match *self {
            Self::Lognormal { mu, sigma } => (mu + 0.5 * sigma * sigma).exp(),
            Self::Exponential { rate } => 1.0 / rate,
            Self::Weibull { shape, scale } => scale * gamma(1.0 + 1.0 / shape),
        }
    }

    pub fn loglik(&self, x: &[f64]) -> f64 {
        match *self {
            Self::Lognormal { mu, sigma } => x
                .iter()
                .map(|&v| {
                    let l = v.ln();
                    -l - sigma.ln() - 0.5 * LN_2PI - (l - mu).powi(2) / (2.0 * sigma * sigma)
                })
                .sum(),
            Self::Exponential { rate } => x.iter().map(|&v| rate.ln() - rate * v).sum(),
            Self::Weibull { shape, scale } => x
                .iter()
                .map(|&v| {
                    shape.ln() - scale.ln() + (shape - 1.0) * (v / scale).ln() - (v / scale).powf(shape)
                })
                .sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelayWarning {
    /// Scale parameter hit its floor or bound; the sample is (near) a point mass.
    DegenerateScale,
    SmallSample { n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    pub family: DelayFamily,
    pub params: DelayParams,
    pub loglik: f64,
    pub aic: f64,
    pub n_valid: usize,
    pub excluded_fraction: f64,
    pub empirical_mean_days: f64,
    pub model_mean_days: f64,
    pub zero_lags_shifted: usize,
    pub zero_shift_days: f64,
    pub warnings: Vec<DelayWarning>,
}

/// Maximum-likelihood fit of one family to strictly positive lags.
pub fn fit_family(x: &[f64], family: DelayFamily) -> Result<DelayModel, DelayError> {
    if x.len() < MIN_FIT_SAMPLES {
        return Err(DelayError::InsufficientData { need: MIN_FIT_SAMPLES, got: x.len() });
    }
    if let Some(&bad) = x.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
        return Err(DelayError::NonPositiveLag(bad));
    }
    let n = x.len();
    let mut warnings = Vec::new();
    let params = match family {
        DelayFamily::Lognormal => {
            let logs: Vec<f64> = x.iter().map(|v| v.ln()).collect();
            let mu = stats::mean(&logs);
            let mut sigma = stats::population_variance(&logs).sqrt();
            if sigma < SIGMA_FLOOR {
                sigma = SIGMA_FLOOR;
                warnings.push(DelayWarning::DegenerateScale);
            }
            DelayParams::Lognormal { mu, sigma }
        }
        DelayFamily::Exponential => DelayParams::Exponential { rate: 1.0 / stats::mean(x) },
        DelayFamily::Weibull => {
            let (shape, scale, at_bound) = weibull_mle(x);
            if at_bound {
                warnings.push(DelayWarning::DegenerateScale);
            }
            DelayParams::Weibull { shape, scale }
        }
    };
    if n < SMALL_SAMPLE {
        warnings.push(DelayWarning::SmallSample { n });
    }
    let loglik = params.loglik(x);
    Ok(DelayModel {
        family,
        params,
        loglik,
        aic: 2.0 * family.n_params() as f64 - 2.0 * loglik,
        n_valid: n,
        excluded_fraction: 0.0,
        empirical_mean_days: stats::mean(x),
        model_mean_days: params.mean(),
        zero_lags_shifted: 0,
        zero_shift_days: ZERO_LAG_SHIFT,
        warnings,
    })
}

const LN_SHAPE_MIN: f64 = -6.907_755_278_982_137; // ln 1e-3
const LN_SHAPE_MAX: f64 = 6.907_755_278_982_137;

/// Profile likelihood over ln(shape); the scale has a closed form given shape.
fn weibull_mle(x: &[f64]) -> (f64, f64, bool) {
    let n = x.len() as f64;
    let logs: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let sum_log: f64 = logs.iter().sum();
    let max_log = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // ln sum x^k, computed relative to the largest lag.
    let log_sum_pow = |k: f64| k * max_log + logs.iter().map(|l| (k * (l - max_log)).exp()).sum::<f64>().ln();
    let neg_profile = |ln_k: f64| {
        let k = ln_k.exp();
        -(n * k.ln() - n * (log_sum_pow(k) - n.ln()) + (k - 1.0) * sum_log - n)
    };
    let (ln_k, _) = stats::brent_minimize(neg_profile, LN_SHAPE_MIN, LN_SHAPE_MAX, 1e-8);
    let k = ln_k.exp();
    let scale = ((log_sum_pow(k) - n.ln()) / k).exp();
    let at_bound = (ln_k - LN_SHAPE_MAX).abs() < 1e-3 || (ln_k - LN_SHAPE_MIN).abs() < 1e-3;
    (k, scale, at_bound)
}

/// Fits a family to a lag sample, shifting zero-day lags first.
pub fn fit_delay(sample: &LagSample, family: DelayFamily) -> Result<DelayModel, DelayError> {
    let mut model = fit_family(&sample.shifted(), family)?;
    model.excluded_fraction = sample.excluded_fraction();
    model.zero_lags_shifted = sample.zero_count();
    model.empirical_mean_days = stats::mean(&sample.days);
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelaySelection {
    pub best: DelayModel,
    /// All three fits in lognormal, exponential, Weibull order.
    pub candidates: Vec<DelayModel>,
}

/// Fits every family and keeps the minimum AIC; ties go to the lognormal.
pub fn select_delay_model(sample: &LagSample) -> Result<DelaySelection, DelayError> {
    let candidates =
        DelayFamily::ALL.iter().map(|&f| fit_delay(sample, f)).collect::<Result<Vec<_>, _>>()?;
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        if c.aic < candidates[best].aic {
            best = i;
        }
    }
    Ok(DelaySelection { best: candidates[best].clone(), candidates })
}

/// How a lag in days is binned into months for the nowcast CDF.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagMonthConvention {
    /// Report month minus incident month. Matches how monthly counts mature.
    #[default]
    CalendarMonths,
    /// `floor(days / 30.44)`.
    ElapsedDays,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NowcastAdjustment {
    /// h*: horizons 0..=h* are inflated.
    pub window_months: u32,
    /// Empirical F(h) for h = 0..=h*.
    pub cdf: Vec<f64>,
    pub cap: f64,
    pub percentile: f64,
}

impl NowcastAdjustment {
    pub fn factor(&self, horizon: u32) -> f64 {
        if horizon > self.window_months {
            return 1.0;
        }
        let f = self.cdf[horizon as usize];
        if f > 0.0 {
            (1.0 / f).min(self.cap)
        } else {
            self.cap
        }
    }

    pub fn factors(&self) -> Vec<f64> {
        (0..=self.window_months).map(|h| self.factor(h)).collect()
    }
}

pub const DEFAULT_PERCENTILE: f64 = 0.95;
pub const DEFAULT_CAP: f64 = 5.0;

pub fn build_nowcast(lag_months: &[u32], percentile: f64, cap: f64) -> Result<NowcastAdjustment, DelayError> {
    if lag_months.is_empty() {
        return Err(DelayError::EmptyLags);
    }
    if !(0.0..=1.0).contains(&percentile) {
        return Err(DelayError::InvalidParameter(format!("percentile {percentile} outside [0, 1]")));
    }
    if !(cap >= 1.0) {
        return Err(DelayError::InvalidParameter(format!("cap {cap} below 1")));
    }
    let as_f64: Vec<f64> = lag_months.iter().map(|&m| f64::from(m)).collect();
    let window = stats::quantile(&as_f64, percentile).ceil() as u32;
    let n = lag_months.len() as f64;
    let cdf = (0..=window)
        .map(|h| lag_months.iter().filter(|&&m| m <= h).count() as f64 / n)
        .collect();
    Ok(NowcastAdjustment { window_months: window, cdf, cap, percentile })
}

/// Inflates recent months: horizon `h = as_of - month` gets `raw * factor(h)`.
pub fn apply_nowcast(
    panel: &MonthlyPanel,
    adj: &NowcastAdjustment,
    as_of: MonthIndex,
) -> Result<MonthlyPanel, DelayError> {
    if let Some(last) = panel.last_month() {
        if as_of < last {
            return Err(DelayError::AsOfBeforePanelEnd { as_of, last });
        }
    }
    let mut out = panel.clone();
    for (i, month) in panel.months.iter().enumerate() {
        let h = month.months_until(as_of);
        let raw = panel.raw_count[i] as f64;
        out.nowcast_count[i] = if h <= i64::from(adj.window_months) { raw * adj.factor(h as u32) } else { raw };
    }
    Ok(out)
}
