//! Exposure denominators: external series, depreciated installed base, and
//! exposure-adjusted incident rates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{MonthIndex, MonthlyPanel};
use crate::stats::{self, LinearTrend};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExposureError {
    #[error("half-life must be positive, got {0}")]
    InvalidHalfLife(f64),
    #[error("index is constant; min-max scaling is undefined")]
    ConstantIndex,
    #[error("scale range ({lo}, {hi}) is empty")]
    InvalidRange { lo: f64, hi: f64 },
    #[error("exposure series does not overlap the panel months")]
    NoOverlap,
    #[error("no month carries positive exposure")]
    MissingExposure,
    #[error("media index missing for {0}")]
    MediaGap(MonthIndex),
    #[error("month range {start}..{end} is empty")]
    EmptyRange { start: MonthIndex, end: MonthIndex },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StarEvent {
    pub repo: String,
    pub event_month: MonthIndex,
    pub stars_added: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExposureSource {
    External,
    DepreciatedInstalledBase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureIndex {
    pub months: Vec<MonthIndex>,
    pub value: Vec<f64>,
    pub source: ExposureSource,
    pub half_life_months: Option<f64>,
    pub scale_range: Option<(f64, f64)>,
}

impl ExposureIndex {
    pub fn pairs(&self) -> Vec<(MonthIndex, f64)> {
        self.months.iter().copied().zip(self.value.iter().copied()).collect()
    }
}

/// Half-life-weighted cumulative stars:
/// `value(t) = sum over events e <= t of stars_e * 0.5^((t - e) / half_life)`.
pub fn depreciated_installed_base(
    events: &[StarEvent],
    half_life_months: f64,
    start: MonthIndex,
    end: MonthIndex,
) -> Result<ExposureIndex, ExposureError> {
    if !(half_life_months > 0.0) || !half_life_months.is_finite() {
        return Err(ExposureError::InvalidHalfLife(half_life_months));
    }
    if start > end {
        return Err(ExposureError::EmptyRange { start, end });
    }
    let months = MonthIndex::range_inclusive(start, end);
    let earliest = events.iter().map(|e| e.event_month).min().unwrap_or(start).min(start);
    // Per-month additions from the earliest event through the range end.
    let span = earliest.months_until(end) as usize + 1;
    let mut added = vec![0.0; span];
    for ev in events.iter().filter(|e| e.event_month <= end) {
        added[earliest.months_until(ev.event_month) as usize] += ev.stars_added;
    }
    let decay = 0.5f64.powf(1.0 / half_life_months);
    let lead = earliest.months_until(start) as usize;
    let mut base = 0.0;
    let mut value = Vec::with_capacity(months.len());
    for (i, add) in added.iter().enumerate() {
        base = base * decay + add;
        if i >= lead {
            value.push(base);
        }
    }
    Ok(ExposureIndex {
        months,
        value,
        source: ExposureSource::DepreciatedInstalledBase,
        half_life_months: Some(half_life_months),
        scale_range: None,
    })
}

pub const DEFAULT_SCALE: (f64, f64) = (10.0, 100.0);

/// Affine min-max map onto `[lo, hi]`.
pub fn scale_range(index: &ExposureIndex, lo: f64, hi: f64) -> Result<ExposureIndex, ExposureError> {
    if !(lo < hi) {
        return Err(ExposureError::InvalidRange { lo, hi });
    }
    let min = index.value.iter().copied().fold(f64::INFINITY, f64::min);
    let max = index.value.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Err(ExposureError::ConstantIndex);
    }
    let value = index
        .value
        .iter()
        .map(|v| if *v == max { hi } else { lo + (v - min) / (max - min) * (hi - lo) })
        .collect();
    Ok(ExposureIndex { value, scale_range: Some((lo, hi)), ..index.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub covered: usize,
    pub uncovered_months: Vec<MonthIndex>,
}

/// Attaches exposure where the series covers panel months.
pub fn merge_external(
    panel: &MonthlyPanel,
    exposure: &[(MonthIndex, f64)],
) -> Result<(MonthlyPanel, Coverage), ExposureError> {
    let mut out = panel.clone();
    out.exposure = vec![None; panel.len()];
    for &(month, value) in exposure {
        if let Some(i) = panel.position(month) {
            out.exposure[i] = Some(value);
        }
    }
    let covered = out.covered_months();
    if covered == 0 {
        return Err(ExposureError::NoOverlap);
    }
    let uncovered_months =
        panel.months.iter().zip(&out.exposure).filter(|(_, e)| e.is_none()).map(|(m, _)| *m).collect();
    Ok((out, Coverage { covered, uncovered_months }))
}

/// Attaches a media index; every panel month must be present.
pub fn attach_media(panel: &MonthlyPanel, media: &[(MonthIndex, f64)]) -> Result<MonthlyPanel, ExposureError> {
    let mut values = vec![None; panel.len()];
    for &(month, v) in media {
        if let Some(i) = panel.position(month) {
            values[i] = Some(v);
        }
    }
    let media_index = values
        .iter()
        .zip(&panel.months)
        .map(|(v, m)| v.ok_or(ExposureError::MediaGap(*m)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MonthlyPanel { media_index: Some(media_index), ..panel.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureRates {
    pub per: f64,
    /// Incidents per `per` exposure units; `None` without positive exposure.
    pub rates: Vec<Option<f64>>,
    /// Total incidents over total exposure on covered months.
    pub aggregate_rate: f64,
    pub mean_monthly_rate: f64,
    pub covered_months: usize,
    /// OLS of rate on month position over covered months.
    pub trend: Option<LinearTrend>,
}

pub fn exposure_adjusted_rate(panel: &MonthlyPanel, per: f64) -> Result<ExposureRates, ExposureError> {
    let rates: Vec<Option<f64>> = panel
        .raw_count
        .iter()
        .zip(&panel.exposure)
        .map(|(&c, e)| e.filter(|&v| v > 0.0).map(|v| c as f64 / (v / per)))
        .collect();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let (mut total_count, mut total_exposure) = (0.0, 0.0);
    for (i, rate) in rates.iter().enumerate() {
        if let Some(r) = rate {
            xs.push(i as f64);
            ys.push(*r);
            total_count += panel.raw_count[i] as f64;
            total_exposure += panel.exposure[i].unwrap_or(0.0);
        }
    }
    if ys.is_empty() {
        return Err(ExposureError::MissingExposure);
    }
    Ok(ExposureRates {
        per,
        aggregate_rate: total_count / total_exposure * per,
        mean_monthly_rate: stats::mean(&ys),
        covered_months: ys.len(),
        trend: stats::ols_trend(&xs, &ys),
        rates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(s: &str) -> MonthIndex {
        s.parse().unwrap()
    }

    fn ev(month: &str, stars: f64) -> StarEvent {
        StarEvent { repo: "r".into(), event_month: m(month), stars_added: stars }
    }

    fn brute_force(events: &[StarEvent], hl: f64, months: &[MonthIndex]) -> Vec<f64> {
        months
            .iter()
            .map(|t| {
                let mut total = 0.0;
                for e in events {
                    let age = e.event_month.months_until(*t);
                    if age >= 0 {
                        total += e.stars_added * 0.5f64.powf(age as f64 / hl);
                    }
                }
                total
            })
            .collect()
    }

    #[test]
    fn half_life_decay() {
        let idx = depreciated_installed_base(&[ev("2020-01", 100.0)], 24.0, m("2020-01"), m("2024-01")).unwrap();
        assert!((idx.value[24] - 50.0).abs() < 1e-9);
        assert!((idx.value[48] - 25.0).abs() < 1e-9);
        assert_eq!(idx.value[0], 100.0);
    }

    #[test]
    fn events_before_range_carry_in() {
        let idx = depreciated_installed_base(&[ev("2018-01", 80.0)], 12.0, m("2019-01"), m("2019-03")).unwrap();
        assert!((idx.value[0] - 40.0).abs() < 1e-9);
        let empty = depreciated_installed_base(&[ev("2021-01", 80.0)], 12.0, m("2019-01"), m("2019-03")).unwrap();
        assert_eq!(empty.value, vec![0.0; 3]);
        assert!(depreciated_installed_base(&[], 0.0, m("2019-01"), m("2019-03")).is_err());
    }

    #[test]
    fn scaling() {
        let idx = ExposureIndex {
            months: vec![m("2020-01"), m("2020-02"), m("2020-03")],
            value: vec![0.0, 5.0, 10.0],
            source: ExposureSource::External,
            half_life_months: None,
            scale_range: None,
        };
        let s = scale_range(&idx, 10.0, 100.0).unwrap();
        assert_eq!(s.value, vec![10.0, 55.0, 100.0]);
        let again = scale_range(&s, 10.0, 100.0).unwrap();
        for (a, b) in again.value.iter().zip(&s.value) {
            assert!((a - b).abs() < 1e-12);
        }
        let flat = ExposureIndex { value: vec![3.0; 3], ..idx };
        assert_eq!(scale_range(&flat, 10.0, 100.0), Err(ExposureError::ConstantIndex));
    }

    #[test]
    fn merge_coverage() {
        let months = MonthIndex::range_inclusive(m("2014-07"), m("2025-02"));
        let panel = MonthlyPanel::from_counts(months, vec![1; 128]).unwrap();
        let dmv: Vec<_> = MonthIndex::range_inclusive(m("2020-12"), m("2024-11")).into_iter().map(|mo| (mo, 5e5)).collect();
        let (merged, cov) = merge_external(&panel, &dmv).unwrap();
        assert_eq!(cov.covered, 48);
        assert_eq!(cov.uncovered_months.len(), 80);
        assert_eq!(merged.covered_months(), 48);

        let all: Vec<_> = panel.months.iter().map(|&mo| (mo, 1.0)).collect();
        assert!(merge_external(&panel, &all).unwrap().1.uncovered_months.is_empty());
        assert_eq!(merge_external(&panel, &[(m("2030-01"), 1.0)]), Err(ExposureError::NoOverlap));
    }

    #[test]
    fn media_must_cover_panel() {
        let panel = MonthlyPanel::from_counts(vec![m("2020-01"), m("2020-02")], vec![1, 2]).unwrap();
        let ok = attach_media(&panel, &[(m("2020-01"), 10.0), (m("2020-02"), 20.0), (m("2020-03"), 1.0)]).unwrap();
        assert_eq!(ok.media_index, Some(vec![10.0, 20.0]));
        assert_eq!(attach_media(&panel, &[(m("2020-01"), 10.0)]), Err(ExposureError::MediaGap(m("2020-02"))));
    }

    #[test]
    fn aggregate_rate_per_million() {
        // 39 incidents over 23.4M miles, spread over three months.
        let months = vec![m("2021-01"), m("2021-02"), m("2021-03")];
        let mut panel = MonthlyPanel::from_counts(months, vec![13, 13, 13]).unwrap();
        panel.exposure = vec![Some(7.8e6); 3];
        let r = exposure_adjusted_rate(&panel, 1e6).unwrap();
        assert!((r.aggregate_rate - 39.0 / 23.4).abs() < 1e-12);
        assert!((r.aggregate_rate - 1.67).abs() < 0.005);
    }

    #[test]
    fn doubling_exposure_halves_rate() {
        let months = vec![m("2021-01"), m("2021-02"), m("2021-03"), m("2021-04")];
        let mut panel = MonthlyPanel::from_counts(months, vec![4; 4]).unwrap();
        panel.exposure = vec![Some(1.0), Some(2.0), Some(4.0), None];
        let r = exposure_adjusted_rate(&panel, 1.0).unwrap();
        assert_eq!(r.rates, vec![Some(4.0), Some(2.0), Some(1.0), None]);
        assert_eq!(r.covered_months, 3);
        panel.exposure = vec![None, Some(0.0), None, None];
        assert_eq!(exposure_adjusted_rate(&panel, 1.0), Err(ExposureError::MissingExposure));
    }

    #[test]
    fn rate_trend_matches_normal_equations() {
        let months = MonthIndex::range_inclusive(m("2021-01"), m("2021-12"));
        let counts = vec![3, 5, 4, 6, 8, 7, 9, 12, 10, 11, 15, 13];
        let mut panel = MonthlyPanel::from_counts(months, counts.clone()).unwrap();
        panel.exposure = (0..12).map(|i| if i == 4 { None } else { Some(2.0 + i as f64 * 0.1) }).collect();
        let r = exposure_adjusted_rate(&panel, 1.0).unwrap();
        let pts: Vec<(f64, f64)> = (0..12).filter(|&i| i != 4).map(|i| (i as f64, counts[i] as f64 / (2.0 + i as f64 * 0.1))).collect();
        let n = pts.len() as f64;
        let (sx, sy) = (pts.iter().map(|p| p.0).sum::<f64>(), pts.iter().map(|p| p.1).sum::<f64>());
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let intercept = (sy - slope * sx) / n;
        let rss: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        let se = (rss / (n - 2.0) / (sxx - sx * sx / n)).sqrt();
        let t = slope / se;
        use statrs::distribution::{ContinuousCDF, StudentsT};
        let p = 2.0 * (1.0 - StudentsT::new(0.0, 1.0, n - 2.0).unwrap().cdf(t.abs()));
        let trend = r.trend.unwrap();
        assert!((trend.slope - slope).abs() < 1e-8);
        assert!((trend.p_value - p).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn base_matches_double_loop(
            raw in prop::collection::vec((0i64..60, 1.0f64..500.0), 50),
            hl in 1.0f64..36.0,
        ) {
            let events: Vec<StarEvent> = raw.iter().map(|&(o, s)| StarEvent {
                repo: "r".into(), event_month: m("2018-01").add_months(o), stars_added: s,
            }).collect();
            let idx = depreciated_installed_base(&events, hl, m("2019-01"), m("2023-12")).unwrap();
            let oracle = brute_force(&events, hl, &idx.months);
            for (a, b) in idx.value.iter().zip(&oracle) {
                prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn base_is_linear_in_events(
            a in prop::collection::vec((0i64..24, 1.0f64..100.0), 1..10),
            b in prop::collection::vec((0i64..24, 1.0f64..100.0), 1..10),
        ) {
            let mk = |v: &Vec<(i64, f64)>| -> Vec<StarEvent> {
                v.iter().map(|&(o, s)| StarEvent { repo: "x".into(), event_month: m("2020-01").add_months(o), stars_added: s }).collect()
            };
            let (ea, eb) = (mk(&a), mk(&b));
            let both: Vec<StarEvent> = ea.iter().chain(&eb).cloned().collect();
            let range = (m("2020-01"), m("2022-06"));
            let va = depreciated_installed_base(&ea, 12.0, range.0, range.1).unwrap().value;
            let vb = depreciated_installed_base(&eb, 12.0, range.0, range.1).unwrap().value;
            let vab = depreciated_installed_base(&both, 12.0, range.0, range.1).unwrap().value;
            for t in 0..vab.len() {
                prop_assert!((vab[t] - va[t] - vb[t]).abs() < 1e-9 * (1.0 + vab[t]));
                if t > 0 {
                    // Non-increasing except for the jump contributed by events at t.
                    let added: f64 = both.iter().filter(|e| e.event_month == range.0.add_months(t as i64)).map(|e| e.stars_added).sum();
                    prop_assert!(vab[t] - added <= vab[t - 1] + 1e-9);
                }
            }
        }

        #[test]
        fn scaling_preserves_order(mut v in prop::collection::vec(-1e3f64..1e3, 3..40)) {
            v.sort_by(f64::total_cmp);
            prop_assume!(v[v.len() - 1] > v[0]);
            let idx = ExposureIndex {
                months: MonthIndex::range_inclusive(m("2020-01"), m("2020-01").add_months(v.len() as i64 - 1)),
                value: v.clone(),
                source: ExposureSource::External,
                half_life_months: None,
                scale_range: None,
            };
            let s = scale_range(&idx, 10.0, 100.0).unwrap();
            prop_assert!((s.value[0] - 10.0).abs() < 1e-9);
            prop_assert!((s.value[v.len() - 1] - 100.0).abs() < 1e-9);
            for w in s.value.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
        }
    }
}
