//! Parameter sweeps with invariant-zone detection: phase threshold,
//! threshold pairs, exposure half-life and negative binomial dispersion.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exposure::{self, ExposureError, StarEvent};
use crate::glm::{self, CountFamily, Formula, GlmError};
use crate::model::{MonthIndex, MonthlyPanel};
use crate::pelt::{self, PeltError, Segmentation};
use crate::phases::{self, Framework, Phase6, PhaseError, PhaseLabel, PhaseShare, PhaseThresholds};
use crate::stats;

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error("excess-risk signal is constant")]
    DegenerateSignal,
    #[error("input lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Pelt(#[from] PeltError),
    #[error(transparent)]
    Exposure(#[from] ExposureError),
    #[error(transparent)]
    Phase(#[from] PhaseError),
}

/// A maximal parameter range over which the month labels do not change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantZone {
    pub lo: f64,
    pub hi: f64,
    /// True when the bound is a value where labels flip rather than the grid edge.
    pub lo_is_flip: bool,
    pub hi_is_flip: bool,
    pub distribution: Vec<PhaseShare>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub theta_low: f64,
    pub distribution: Vec<PhaseShare>,
    pub labels: Vec<PhaseLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub axis: String,
    pub framework: Framework,
    pub grid: Vec<f64>,
    pub rows: Vec<ThresholdRow>,
    pub invariant_zones: Vec<InvariantZone>,
}

/// Thresholds with `theta_low` replaced; `theta_high` is lifted just above it when needed.
pub fn with_theta_low(base: &PhaseThresholds, theta: f64) -> PhaseThresholds {
    let mut th = *base;
    th.theta_low = theta;
    if th.theta_high <= theta {
        th.theta_high = theta + 1e-9 * (1.0 + theta.abs());
    }
    th
}

fn label_distribution(labels: &[PhaseLabel], framework: Framework) -> Vec<PhaseShare> {
    match framework {
        Framework::Six => {
            let six: Vec<Phase6> = labels.iter().filter_map(|l| if let PhaseLabel::Six(p) = l { Some(*p) } else { None }).collect();
            phases::six_distribution(&six)
        }
        Framework::Three => {
            let three: Vec<phases::Phase3> =
                labels.iter().filter_map(|l| if let PhaseLabel::Three(p) = l { Some(*p) } else { None }).collect();
            phases::three_distribution(&three)
        }
    }
}

pub fn labels_at(seg: &Segmentation, base: &PhaseThresholds, framework: Framework, theta: f64) -> Result<Vec<PhaseLabel>, PhaseError> {
    Ok(phases::classify_segments(seg, &with_theta_low(base, theta), framework)?.month_labels)
}

/// Segment labels for every grid value of `theta_low`, plus the exact zones on the grid hull.
pub fn threshold_sweep(
    seg: &Segmentation,
    grid: &[f64],
    base: &PhaseThresholds,
    framework: Framework,
) -> Result<ThresholdSweep, SensitivityError> {
    if grid.is_empty() {
        return Err(SensitivityError::EmptyGrid);
    }
    let rows = grid
        .iter()
        .map(|&theta| {
            let labels = labels_at(seg, base, framework, theta)?;
            Ok(ThresholdRow { theta_low: theta, distribution: label_distribution(&labels, framework), labels })
        })
        .collect::<Result<Vec<_>, SensitivityError>>()?;
    let lo = grid.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut candidates: Vec<f64> = seg.segments.iter().map(|s| s.mean).collect();
    candidates.push(base.theta_high);
    let invariant_zones = invariant_zones(lo, hi, &candidates, |t| labels_at(seg, base, framework, t), framework)?;
    Ok(ThresholdSweep { axis: "theta_low".into(), framework, grid: grid.to_vec(), rows, invariant_zones })
}

/// Labels are constant between consecutive candidate flip values; adjacent pieces with
/// equal labels merge into one zone.
fn invariant_zones<F>(lo: f64, hi: f64, candidates: &[f64], labels: F, framework: Framework) -> Result<Vec<InvariantZone>, SensitivityError>
where
    F: Fn(f64) -> Result<Vec<PhaseLabel>, PhaseError>,
{
    let mut cuts: Vec<f64> = candidates.iter().copied().filter(|&c| c > lo && c < hi).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut edges = vec![lo];
    edges.extend(cuts);
    edges.push(hi);
    if lo == hi {
        let l = labels(lo)?;
        return Ok(vec![InvariantZone { lo, hi, lo_is_flip: false, hi_is_flip: false, distribution: label_distribution(&l, framework) }]);
    }
    let mut zones: Vec<(f64, f64, Vec<PhaseLabel>)> = Vec::new();
    for w in edges.windows(2) {
        let l = labels(0.5 * (w[0] + w[1]))?;
        match zones.last_mut() {
            Some(z) if z.2 == l => z.1 = w[1],
            _ => zones.push((w[0], w[1], l)),
        }
    }
    Ok(zones
        .into_iter()
        .map(|(a, b, l)| InvariantZone {
            lo: a,
            hi: b,
            lo_is_flip: a > lo,
            hi_is_flip: b < hi,
            distribution: label_distribution(&l, framework),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoThresholdSweep {
    pub grid_low: Vec<f64>,
    pub grid_high: Vec<f64>,
    /// Percent of months labeled Endemic Unmitigated, indexed `[low][high]`; `None` where low >= high.
    pub endemic_unmitigated_pct: Vec<Vec<Option<f64>>>,
    pub low_axis_flat: bool,
    pub high_axis_flat: bool,
}

/// Month-level six-phase labels over a grid of threshold pairs.
pub fn two_threshold_sweep(
    counts: &[f64],
    risk: &[f64],
    slope: &[f64],
    grid_low: &[f64],
    grid_high: &[f64],
    base: &PhaseThresholds,
) -> Result<TwoThresholdSweep, SensitivityError> {
    if grid_low.is_empty() || grid_high.is_empty() {
        return Err(SensitivityError::EmptyGrid);
    }
    if counts.len() != risk.len() || slope.len() != risk.len() {
        return Err(SensitivityError::LengthMismatch(counts.len(), risk.len()));
    }
    let n = risk.len().max(1) as f64;
    let mut table = Vec::with_capacity(grid_low.len());
    for &lo in grid_low {
        let mut row = Vec::with_capacity(grid_high.len());
        for &hi in grid_high {
            if lo >= hi {
                row.push(None);
                continue;
            }
            let th = PhaseThresholds { theta_low: lo, theta_high: hi, ..*base };
            let mut hits = 0usize;
            for i in 0..risk.len() {
                if phases::classify_six(counts[i], risk[i], slope[i], &th)? == Phase6::EndemicUnmitigated {
                    hits += 1;
                }
            }
            row.push(Some(100.0 * hits as f64 / n));
        }
        table.push(row);
    }
    let low_axis_flat = (0..grid_high.len()).all(|j| {
        let vals: Vec<f64> = table.iter().filter_map(|r| r[j]).collect();
        vals.windows(2).all(|w| w[0] == w[1])
    });
    let high_axis_flat = table.iter().all(|r| {
        let vals: Vec<f64> = r.iter().flatten().copied().collect();
        vals.windows(2).all(|w| w[0] == w[1])
    });
    Ok(TwoThresholdSweep {
        grid_low: grid_low.to_vec(),
        grid_high: grid_high.to_vec(),
        endemic_unmitigated_pct: table,
        low_axis_flat,
        high_axis_flat,
    })
}

/// Settings for the exposure, count model, excess risk and changepoint chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakPipeline {
    pub formula: Formula,
    pub epsilon: f64,
    pub penalty_grid: Vec<f64>,
    pub min_segment: usize,
    pub exposure_scale: (f64, f64),
}

impl Default for BreakPipeline {
    fn default() -> Self {
        Self {
            formula: Formula { time_linear: true, time_quadratic: false, media: false, offset: true },
            epsilon: glm::EXCESS_EPSILON,
            penalty_grid: pelt::default_grid(),
            min_segment: pelt::DEFAULT_MIN_SEGMENT,
            exposure_scale: exposure::DEFAULT_SCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakOutcome {
    pub break_month: Option<MonthIndex>,
    pub break_position: Option<usize>,
    pub n_segments: usize,
    pub rho_star: f64,
    /// Mean standardized excess risk before and after the main break.
    pub pre_mean: Option<f64>,
    pub post_mean: Option<f64>,
}

/// Count model, excess risk, plateau-selected PELT and the largest upward break.
pub fn detect_break(panel: &MonthlyPanel, family: CountFamily, cfg: &BreakPipeline) -> Result<BreakOutcome, SensitivityError> {
    let fit = glm::fit_count_model(panel, cfg.formula, family)?;
    let excess = glm::excess_risk(&fit, cfg.epsilon)?;
    let risk = excess.standardized.ok_or(SensitivityError::DegenerateSignal)?;
    let sweep = pelt::penalty_sweep(&risk.z, &cfg.penalty_grid, cfg.min_segment)?;
    let choice = pelt::select_by_plateau(&sweep)?;
    let seg = pelt::pelt_detect(&risk.z, choice.rho_star, cfg.min_segment)?;
    let pos = seg.main_break();
    Ok(BreakOutcome {
        break_month: pos.map(|p| risk.months[p]),
        break_position: pos,
        n_segments: seg.n_segments(),
        rho_star: choice.rho_star,
        pre_mean: pos.map(|p| stats::mean(&risk.z[..p])),
        post_mean: pos.map(|p| stats::mean(&risk.z[p..])),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakSweepRow {
    pub value: f64,
    pub outcome: Result<BreakOutcome, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakSweep {
    pub axis: String,
    pub grid: Vec<f64>,
    pub rows: Vec<BreakSweepRow>,
    /// Largest distance in months between detected break months.
    pub break_spread_months: Option<i64>,
}

fn spread(rows: &[BreakSweepRow]) -> Option<i64> {
    let months: Vec<MonthIndex> = rows.iter().filter_map(|r| r.outcome.as_ref().ok().and_then(|o| o.break_month)).collect();
    let lo = months.iter().min()?;
    let hi = months.iter().max()?;
    Some(lo.months_until(*hi))
}

/// Rebuilds the exposure index at each half-life and re-runs the break chain.
pub fn halflife_sweep(
    events: &[StarEvent],
    panel: &MonthlyPanel,
    halflives: &[f64],
    family: CountFamily,
    cfg: &BreakPipeline,
) -> Result<BreakSweep, SensitivityError> {
    if halflives.is_empty() {
        return Err(SensitivityError::EmptyGrid);
    }
    let (start, end) = match (panel.first_month(), panel.last_month()) {
        (Some(s), Some(e)) => (s, e),
        _ => return Err(SensitivityError::EmptyGrid),
    };
    let rows: Vec<BreakSweepRow> = halflives
        .par_iter()
        .map(|&hl| {
            let run = || -> Result<BreakOutcome, SensitivityError> {
                let idx = exposure::depreciated_installed_base(events, hl, start, end)?;
                let scaled = exposure::scale_range(&idx, cfg.exposure_scale.0, cfg.exposure_scale.1)?;
                let (with_exp, _) = exposure::merge_external(panel, &scaled.pairs())?;
                detect_break(&with_exp, family, cfg)
            };
            BreakSweepRow { value: hl, outcome: run().map_err(|e| e.to_string()) }
        })
        .collect();
    let break_spread_months = spread(&rows);
    Ok(BreakSweep { axis: "half_life".into(), grid: halflives.to_vec(), rows, break_spread_months })
}

/// Re-runs the break chain under fixed negative binomial dispersions.
pub fn dispersion_sweep(panel: &MonthlyPanel, alphas: &[f64], cfg: &BreakPipeline) -> Result<BreakSweep, SensitivityError> {
    if alphas.is_empty() {
        return Err(SensitivityError::EmptyGrid);
    }
    let rows: Vec<BreakSweepRow> = alphas
        .par_iter()
        .map(|&alpha| BreakSweepRow {
            value: alpha,
            outcome: detect_break(panel, CountFamily::NegBin { alpha }, cfg).map_err(|e| e.to_string()),
        })
        .collect();
    let break_spread_months = spread(&rows);
    Ok(BreakSweep { axis: "alpha".into(), grid: alphas.to_vec(), rows, break_spread_months })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pelt::Segment;
    use crate::phases::Phase3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    fn seg(parts: &[(usize, f64, f64, f64)]) -> Segmentation {
        let mut start = 0;
        let mut segments = Vec::new();
        let mut cps = Vec::new();
        for &(len, mean, slope, count) in parts {
            if start > 0 {
                cps.push(start);
            }
            segments.push(Segment {
                start,
                end: start + len - 1,
                n_months: len,
                mean,
                within_slope: slope,
                cost: 0.0,
                mean_count: Some(count),
            });
            start += len;
        }
        Segmentation { penalty: 1.0, min_segment: 2, changepoints: cps, segments, total_cost: 0.0 }
    }

    fn df_segments() -> Segmentation {
        seg(&[(40, -0.05, 0.005, 0.2), (20, -0.83, 0.027, 0.3), (43, 0.43, -0.009, 8.0)])
    }

    fn pct(d: &[PhaseShare], name: &str) -> f64 {
        d.iter().find(|s| s.phase == name).unwrap().percent
    }

    #[test]
    fn df_threshold_rows() {
        let base = PhaseThresholds::new(0.14, 0.54).unwrap();
        let grid = [-0.30, 0.14, 0.50];
        let sw = threshold_sweep(&df_segments(), &grid, &base, Framework::Three).unwrap();
        let d = &sw.rows[1].distribution;
        assert!((pct(d, "Dormant Baseline") - 58.3).abs() < 0.05);
        assert!((pct(d, "Endemic Unmitigated") - 41.7).abs() < 0.05);
        let d = &sw.rows[0].distribution;
        assert!((pct(d, "Dormant Baseline") - 19.4).abs() < 0.05);
        assert!((pct(d, "Endemic Unmitigated") - 80.6).abs() < 0.05);
        assert_eq!(pct(&sw.rows[2].distribution, "Dormant Baseline"), 100.0);
    }

    #[test]
    fn zone_boundaries_are_straddled_segment_risks() {
        let base = PhaseThresholds::new(0.14, 0.54).unwrap();
        let grid: Vec<f64> = (0..=16).map(|i| -1.0 + 0.1 * i as f64).collect();
        let s = df_segments();
        let sw = threshold_sweep(&s, &grid, &base, Framework::Three).unwrap();
        let flips: Vec<f64> = sw.invariant_zones.iter().filter(|z| z.lo_is_flip).map(|z| z.lo).collect();
        let mut expected: Vec<f64> = s.segments.iter().map(|x| x.mean).filter(|&m| m > -1.0 && m < 0.6).collect();
        expected.sort_by(f64::total_cmp);
        assert_eq!(flips, expected);
        let zone = sw.invariant_zones.iter().find(|z| z.lo == -0.05).unwrap();
        assert_eq!(zone.hi, 0.43);
        for z in &sw.invariant_zones {
            let mid = labels_at(&s, &base, Framework::Three, 0.5 * (z.lo + z.hi)).unwrap();
            let eps = 1e-7;
            assert_eq!(labels_at(&s, &base, Framework::Three, z.lo + eps).unwrap(), mid);
            assert_eq!(labels_at(&s, &base, Framework::Three, z.hi - eps).unwrap(), mid);
        }
        for w in sw.invariant_zones.windows(2) {
            assert_eq!(w[0].hi, w[1].lo);
        }
    }

    #[test]
    fn two_threshold_axes() {
        let counts = [0.0, 2.0, 3.0, 1.0, 4.0];
        let z = [-0.5, 0.1, 0.6, 0.3, 1.2];
        let slope = [0.0; 5];
        let base = PhaseThresholds::new(-0.3, 0.3).unwrap();
        let sw = two_threshold_sweep(&counts, &z, &slope, &[-0.4, -0.2, 0.0], &[0.2, 0.5, 2.0], &base).unwrap();
        assert!(sw.low_axis_flat);
        assert!(!sw.high_axis_flat);
        assert_eq!(sw.endemic_unmitigated_pct[0][2], Some(0.0));
        // Direct reclassification oracle for one cell.
        let expected = (0..5).filter(|&i| counts[i] > 0.0 && z[i] >= 0.5 && slope[i] <= 0.05).count() as f64 * 20.0;
        assert_eq!(sw.endemic_unmitigated_pct[1][1], Some(expected));
    }

    #[test]
    fn single_value_sweeps() {
        let base = PhaseThresholds::new(0.14, 0.54).unwrap();
        let sw = threshold_sweep(&df_segments(), &[0.14], &base, Framework::Three).unwrap();
        assert_eq!(sw.invariant_zones.len(), 1);
        let labels = labels_at(&df_segments(), &base, Framework::Three, 0.14).unwrap();
        assert_eq!(labels[0], PhaseLabel::Three(Phase3::DormantBaseline));
    }

    fn step_panel(seed: u64) -> (MonthlyPanel, Vec<StarEvent>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start: MonthIndex = "2016-01".parse().unwrap();
        let n = 103;
        let months: Vec<MonthIndex> = (0..n).map(|i| start.add_months(i as i64)).collect();
        let events: Vec<StarEvent> = (0..n)
            .map(|i| StarEvent { repo: "tool".into(), event_month: months[i], stars_added: 50.0 + 10.0 * i as f64 })
            .collect();
        let idx = exposure::depreciated_installed_base(&events, 12.0, months[0], months[n - 1]).unwrap();
        let scaled = exposure::scale_range(&idx, 10.0, 100.0).unwrap();
        let counts: Vec<u64> = (0..n)
            .map(|i| {
                let rate = scaled.value[i] * if i >= 60 { 0.12 } else { 0.03 };
                Poisson::new(rate).unwrap().sample(&mut rng) as u64
            })
            .collect();
        let mut panel = MonthlyPanel::from_counts(months, counts).unwrap();
        panel.nowcast_count = panel.raw_as_f64();
        (panel, events)
    }

    #[test]
    fn halflife_and_dispersion_breaks_near_step() {
        let (panel, events) = step_panel(3);
        let cfg = BreakPipeline { formula: Formula { time_linear: false, time_quadratic: false, media: false, offset: true }, ..Default::default() };
        let hl = halflife_sweep(&events, &panel, &[6.0, 12.0, 24.0], CountFamily::NegBin { alpha: 0.5 }, &cfg).unwrap();
        for row in &hl.rows {
            let pos = row.outcome.as_ref().unwrap().break_position.unwrap();
            assert!(pos.abs_diff(60) <= 2, "half-life {}: {pos}", row.value);
        }
        assert!(hl.break_spread_months.unwrap() <= 2);
        let idx = exposure::depreciated_installed_base(&events, 12.0, panel.months[0], *panel.months.last().unwrap()).unwrap();
        let scaled = exposure::scale_range(&idx, 10.0, 100.0).unwrap();
        let (with_exp, _) = exposure::merge_external(&panel, &scaled.pairs()).unwrap();
        let disp = dispersion_sweep(&with_exp, &[0.5, 1.0, 1.5, 2.0], &cfg).unwrap();
        assert!(disp.break_spread_months.unwrap() <= 2);
        let one = dispersion_sweep(&with_exp, &[1.0], &cfg).unwrap();
        assert_eq!(one.rows.len(), 1);
        let one = halflife_sweep(&events, &panel, &[12.0], CountFamily::NegBin { alpha: 0.5 }, &cfg).unwrap();
        assert_eq!(one.rows.len(), 1);
    }
}
