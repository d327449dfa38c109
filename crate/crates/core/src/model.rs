//! Shared temporal data model: calendar months, the aligned monthly panel,
//! standardized risk series, and severity weighting.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::stats;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("series has zero variance; standardization is undefined")]
    ZeroVariance,
    #[error("series too short: need at least {need} points, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("vector length mismatch: expected {expected}, got {got} for `{field}`")]
    LengthMismatch { field: &'static str, expected: usize, got: usize },
    #[error("unknown severity level `{0}`")]
    UnknownSeverityLevel(String),
    #[error("severity weights must be strictly increasing with level")]
    NonMonotoneScale,
    #[error("invalid month `{0}`, expected YYYY-MM")]
    InvalidMonth(String),
    #[error("rolling window must be at least 2, got {0}")]
    InvalidWindow(usize),
}

/// A calendar month. Ordered chronologically; serialized as `"YYYY-MM"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MonthIndex {
    year: i32,
    month: u32,
}

impl MonthIndex {
    pub fn new(year: i32, month: u32) -> Result<Self, ModelError> {
        if !(1..=12).contains(&month) {
            return Err(ModelError::InvalidMonth(format!("{year}-{month}")));
        }
        Ok(Self { year, month })
    }

    pub fn from_date(date: NaiveDate) -> Self {
        Self { year: date.year(), month: date.month() }
    }

    pub fn year(self) -> i32 {
        self.year
    }

    pub fn month(self) -> u32 {
        self.month
    }

    /// Months since year 0, January.
    pub fn ordinal(self) -> i64 {
        i64::from(self.year) * 12 + i64::from(self.month) - 1
    }

    pub fn from_ordinal(ordinal: i64) -> Self {
        Self {
            year: ordinal.div_euclid(12) as i32,
            month: ordinal.rem_euclid(12) as u32 + 1,
        }
    }

    pub fn add_months(self, delta: i64) -> Self {
        Self::from_ordinal(self.ordinal() + delta)
    }

    /// Signed number of months from `self` to `later`.
    pub fn months_until(self, later: MonthIndex) -> i64 {
        later.ordinal() - self.ordinal()
    }

    /// Inclusive, gap-free range.
    pub fn range_inclusive(start: MonthIndex, end: MonthIndex) -> Vec<MonthIndex> {
        (start.ordinal()..=end.ordinal()).map(Self::from_ordinal).collect()
    }

    pub fn first_day(self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.year, self.month, 1).expect("valid month")
    }
}

impl fmt::Display for MonthIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for MonthIndex {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::InvalidMonth(s.to_string());
        let trimmed = s.trim();
        let (y, m) = trimmed.split_once('-').ok_or_else(bad)?;
        // Accept full ISO dates too; the day is dropped.
        let m = m.split('-').next().ok_or_else(bad)?;
        let year: i32 = y.parse().map_err(|_| bad())?;
        let month: u32 = m.parse().map_err(|_| bad())?;
        Self::new(year, month).map_err(|_| bad())
    }
}

impl Serialize for MonthIndex {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MonthIndex {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Aligned per-month vectors for one incident stream.
///
/// `exposure` holds `None` for months without denominator coverage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthlyPanel {
    pub months: Vec<MonthIndex>,
    pub raw_count: Vec<u64>,
    pub nowcast_count: Vec<f64>,
    pub exposure: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media_index: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity_sum: Option<Vec<f64>>,
}

impl MonthlyPanel {
    /// Panel with nowcast equal to raw counts and no exposure or media.
    pub fn from_counts(months: Vec<MonthIndex>, raw_count: Vec<u64>) -> Result<Self, ModelError> {
        if raw_count.len() != months.len() {
            return Err(ModelError::LengthMismatch {
                field: "raw_count",
                expected: months.len(),
                got: raw_count.len(),
            });
        }
        let nowcast_count = raw_count.iter().map(|&c| c as f64).collect();
        let exposure = vec![None; months.len()];
        Ok(Self { months, raw_count, nowcast_count, exposure, media_index: None, severity_sum: None })
    }

    pub fn len(&self) -> usize {
        self.months.len()
    }

    pub fn is_empty(&self) -> bool {
        self.months.is_empty()
    }

    pub fn first_month(&self) -> Option<MonthIndex> {
        self.months.first().copied()
    }

    pub fn last_month(&self) -> Option<MonthIndex> {
        self.months.last().copied()
    }

    pub fn position(&self, month: MonthIndex) -> Option<usize> {
        let first = self.first_month()?;
        let offset = first.months_until(month);
        (offset >= 0 && (offset as usize) < self.len()).then_some(offset as usize)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.months.len();
        let check = |field: &'static str, got: usize| {
            if got == n {
                Ok(())
            } else {
                Err(ModelError::LengthMismatch { field, expected: n, got })
            }
        };
        check("raw_count", self.raw_count.len())?;
        check("nowcast_count", self.nowcast_count.len())?;
        check("exposure", self.exposure.len())?;
        if let Some(m) = &self.media_index {
            check("media_index", m.len())?;
        }
        if let Some(s) = &self.severity_sum {
            check("severity_sum", s.len())?;
        }
        Ok(())
    }

    pub fn raw_as_f64(&self) -> Vec<f64> {
        self.raw_count.iter().map(|&c| c as f64).collect()
    }

    /// Exposure vector when every month is covered.
    pub fn full_exposure(&self) -> Option<Vec<f64>> {
        self.exposure.iter().copied().collect()
    }

    pub fn covered_months(&self) -> usize {
        self.exposure.iter().filter(|e| e.is_some()).count()
    }
}

/// Standardized values together with the constants needed to invert them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardized {
    pub z: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

impl Standardized {
    pub fn unstandardize(&self) -> Vec<f64> {
        self.z.iter().map(|z| z * self.sd + self.mean).collect()
    }
}

/// Z-scores with the population standard deviation (divide by `n`).
pub fn standardize(series: &[f64]) -> Result<Standardized, ModelError> {
    if series.len() < 2 {
        return Err(ModelError::TooShort { need: 2, got: series.len() });
    }
    let mean = stats::mean(series);
    let sd = stats::population_variance(series).sqrt();
    // Relative guard: a constant series can leave rounding residue in the variance.
    if !(sd > 1e-12 * (1.0 + mean.abs())) {
        return Err(ModelError::ZeroVariance);
    }
    let z = series.iter().map(|x| (x - mean) / sd).collect();
    Ok(Standardized { z, mean, sd })
}

/// OLS slope over a trailing window ending at each position.
///
/// The first `window - 1` positions use whatever points are available; a
/// single point has slope 0.
pub fn rolling_slope(series: &[f64], window: usize) -> Result<Vec<f64>, ModelError> {
    if window < 2 {
        return Err(ModelError::InvalidWindow(window));
    }
    Ok((0..series.len())
        .map(|t| {
            let start = (t + 1).saturating_sub(window);
            stats::index_slope(&series[start..=t])
        })
        .collect())
}

/// Standardized risk level plus local trend for each month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSeries {
    pub months: Vec<MonthIndex>,
    pub z: Vec<f64>,
    pub slope: Vec<f64>,
    pub window_mean: f64,
    pub window_sd: f64,
    pub sd_convention: String,
}

pub const TREND_WINDOW: usize = 3;

impl RiskSeries {
    /// Standardizes `values` over the full window and attaches 3-month slopes
    /// of the standardized series.
    pub fn from_signal(months: Vec<MonthIndex>, values: &[f64]) -> Result<Self, ModelError> {
        if months.len() != values.len() {
            return Err(ModelError::LengthMismatch {
                field: "values",
                expected: months.len(),
                got: values.len(),
            });
        }
        let st = standardize(values)?;
        let slope = rolling_slope(&st.z, TREND_WINDOW)?;
        Ok(Self {
            months,
            z: st.z,
            slope,
            window_mean: st.mean,
            window_sd: st.sd,
            sd_convention: "population".to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn position(&self, month: MonthIndex) -> Option<usize> {
        self.months.iter().position(|m| *m == month)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeverityLevel {
    Negligible,
    Minor,
    Substantial,
    Severe,
}

impl FromStr for SeverityLevel {
    type Err = ModelError;

    /// Accepts bare names (`Minor`) and numbered forms (`2 Minor`), any case.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let name = s.trim().trim_start_matches(|c: char| c.is_ascii_digit() || c.is_whitespace());
        match name.to_ascii_lowercase().as_str() {
            "negligible" => Ok(Self::Negligible),
            "minor" => Ok(Self::Minor),
            "substantial" => Ok(Self::Substantial),
            "severe" => Ok(Self::Severe),
            _ => Err(ModelError::UnknownSeverityLevel(s.to_string())),
        }
    }
}

impl fmt::Display for SeverityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::Negligible => "Negligible",
            Self::Minor => "Minor",
            Self::Substantial => "Substantial",
            Self::Severe => "Severe",
        };
        f.write_str(name)
    }
}

/// Level-to-weight map, strictly increasing with level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityScale {
    weights: BTreeMap<SeverityLevel, f64>,
}

impl SeverityScale {
    pub fn new(weights: BTreeMap<SeverityLevel, f64>) -> Result<Self, ModelError> {
        let increasing = weights.values().zip(weights.values().skip(1)).all(|(a, b)| a < b);
        if !increasing {
            return Err(ModelError::NonMonotoneScale);
        }
        Ok(Self { weights })
    }

    pub fn weight(&self, level: SeverityLevel) -> Result<f64, ModelError> {
        self.weights
            .get(&level)
            .copied()
            .ok_or_else(|| ModelError::UnknownSeverityLevel(level.to_string()))
    }
}

impl Default for SeverityScale {
    /// KABCO-inspired weights 1 / 3 / 10 / 50.
    fn default() -> Self {
        let weights = BTreeMap::from([
            (SeverityLevel::Negligible, 1.0),
            (SeverityLevel::Minor, 3.0),
            (SeverityLevel::Substantial, 10.0),
            (SeverityLevel::Severe, 50.0),
        ]);
        Self { weights }
    }
}

pub fn severity_sum(levels: &[SeverityLevel], scale: &SeverityScale) -> Result<f64, ModelError> {
    levels.iter().map(|&l| scale.weight(l)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn month_parsing_and_arithmetic() {
        let m: MonthIndex = "2017-03".parse().unwrap();
        assert_eq!(m.to_string(), "2017-03");
        assert_eq!(m.add_months(102).to_string(), "2025-09");
        assert_eq!(m.months_until("2025-09".parse().unwrap()), 102);
        assert_eq!("2020-01-10".parse::<MonthIndex>().unwrap().to_string(), "2020-01");
        assert!("2020-13".parse::<MonthIndex>().is_err());
        assert_eq!(MonthIndex::from_ordinal(m.ordinal()), m);
        let start: MonthIndex = "2014-07".parse().unwrap();
        let end: MonthIndex = "2025-02".parse().unwrap();
        assert_eq!(MonthIndex::range_inclusive(start, end).len(), 128);
    }

    #[test]
    fn standardize_closed_form() {
        let st = standardize(&[1.0, 2.0, 3.0]).unwrap();
        assert!((st.mean - 2.0).abs() < 1e-15);
        assert!((st.sd - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let expected = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((st.z[0] + expected).abs() < 1e-12);
        assert!(st.z[1].abs() < 1e-15);
        assert!((st.z[2] - expected).abs() < 1e-12);
        assert!((st.z[2] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn standardize_rejects_constant() {
        assert_eq!(standardize(&[5.0, 5.0, 5.0]), Err(ModelError::ZeroVariance));
        assert!(matches!(standardize(&[1.0]), Err(ModelError::TooShort { .. })));
    }

    #[test]
    fn standardize_is_idempotent() {
        let once = standardize(&[3.0, -1.0, 4.0, 1.0, 5.0, 9.0]).unwrap();
        let twice = standardize(&once.z).unwrap();
        for (a, b) in once.z.iter().zip(&twice.z) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rolling_slope_basic() {
        let s = rolling_slope(&[0.0, 1.0, 2.0], 3).unwrap();
        assert_eq!(s, vec![0.0, 1.0, 1.0]);
        assert!(rolling_slope(&[5.0; 4], 3).unwrap().iter().all(|&v| v == 0.0));
        assert!(rolling_slope(&[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn risk_series_is_unit_scaled() {
        let months = MonthIndex::range_inclusive("2020-01".parse().unwrap(), "2020-08".parse().unwrap());
        let r = RiskSeries::from_signal(months, &[1.0, 4.0, 2.0, 8.0, 5.0, 7.0, 1.0, 0.0]).unwrap();
        assert!(stats::mean(&r.z).abs() < 1e-9);
        assert!((stats::population_variance(&r.z).sqrt() - 1.0).abs() < 1e-9);
        assert_eq!(r.sd_convention, "population");
    }

    #[test]
    fn severity_weights() {
        let scale = SeverityScale::default();
        use SeverityLevel::*;
        assert_eq!(severity_sum(&[Negligible, Minor, Substantial], &scale).unwrap(), 14.0);
        assert_eq!(severity_sum(&[], &scale).unwrap(), 0.0);
        assert_eq!(severity_sum(&[Severe], &scale).unwrap(), 50.0);
        assert_eq!("4 Severe".parse::<SeverityLevel>().unwrap(), Severe);
        assert!("catastrophic".parse::<SeverityLevel>().is_err());
    }

    #[test]
    fn partial_scale_reports_unknown_level() {
        let scale = SeverityScale::new(BTreeMap::from([(SeverityLevel::Minor, 2.0)])).unwrap();
        assert!(matches!(
            severity_sum(&[SeverityLevel::Severe], &scale),
            Err(ModelError::UnknownSeverityLevel(_))
        ));
        let bad = BTreeMap::from([(SeverityLevel::Minor, 2.0), (SeverityLevel::Severe, 1.0)]);
        assert_eq!(SeverityScale::new(bad), Err(ModelError::NonMonotoneScale));
    }

    fn brute_force_slope(window: &[f64]) -> f64 {
        // Normal equations for y = a + b x on x = 0..n.
        let n = window.len() as f64;
        let sx: f64 = (0..window.len()).map(|i| i as f64).sum();
        let sxx: f64 = (0..window.len()).map(|i| (i * i) as f64).sum();
        let sy: f64 = window.iter().sum();
        let sxy: f64 = window.iter().enumerate().map(|(i, y)| i as f64 * y).sum();
        (n * sxy - sx * sy) / (n * sxx - sx * sx)
    }

    proptest! {
        #[test]
        fn slope_matches_normal_equations(series in prop::collection::vec(-50.0f64..50.0, 20)) {
            let slopes = rolling_slope(&series, 3).unwrap();
            for t in 2..series.len() {
                let oracle = brute_force_slope(&series[t - 2..=t]);
                prop_assert!((slopes[t] - oracle).abs() < 1e-9);
            }
            prop_assert!((slopes[1] - (series[1] - series[0])).abs() < 1e-9);
            prop_assert_eq!(slopes[0], 0.0);
        }

        #[test]
        fn slope_is_shift_equivariant(
            series in prop::collection::vec(-50.0f64..50.0, 5..30),
            c in -10.0f64..10.0,
            drift in -3.0f64..3.0,
        ) {
            let base = rolling_slope(&series, 3).unwrap();
            let shifted: Vec<f64> = series.iter().map(|x| x + c).collect();
            let tilted: Vec<f64> = series.iter().enumerate().map(|(t, x)| x + drift * t as f64).collect();
            let s1 = rolling_slope(&shifted, 3).unwrap();
            let s2 = rolling_slope(&tilted, 3).unwrap();
            for t in 0..series.len() {
                prop_assert!((base[t] - s1[t]).abs() < 1e-9);
                if t >= 2 {
                    prop_assert!((base[t] + drift - s2[t]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn standardize_round_trips(series in prop::collection::vec(-1e3f64..1e3, 2..40)) {
            if let Ok(st) = standardize(&series) {
                for (a, b) in st.unstandardize().iter().zip(&series) {
                    prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
                }
            }
        }

        #[test]
        fn severity_sum_is_additive(
            a in prop::collection::vec(0usize..4, 0..10),
            b in prop::collection::vec(0usize..4, 0..10),
        ) {
            use SeverityLevel::*;
            let levels = [Negligible, Minor, Substantial, Severe];
            let la: Vec<_> = a.iter().map(|&i| levels[i]).collect();
            let lb: Vec<_> = b.iter().map(|&i| levels[i]).collect();
            let joined: Vec<_> = la.iter().chain(&lb).copied().collect();
            let scale = SeverityScale::default();
            prop_assert_eq!(
                severity_sum(&joined, &scale).unwrap(),
                severity_sum(&la, &scale).unwrap() + severity_sum(&lb, &scale).unwrap()
            );
        }
    }
}
