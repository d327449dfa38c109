//! Exact penalized changepoint detection (PELT) under an L2 cost, with
//! penalty sweeps and plateau-stability selection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats;

pub const DEFAULT_MIN_SEGMENT: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PeltError {
    #[error("series of length {n} is too short for minimum segment {min_segment}")]
    SeriesTooShort { n: usize, min_segment: usize },
    #[error("penalty must be positive and finite, got {0}")]
    InvalidPenalty(f64),
    #[error("minimum segment length must be at least 1")]
    InvalidMinSegment,
    #[error("signal contains a non-finite value")]
    NonFinite,
    #[error("penalty grid must be strictly ascending")]
    UnsortedGrid,
    #[error("penalty sweep is empty")]
    EmptySweep,
    #[error("variance must be positive, got {0}")]
    InvalidVariance(f64),
    #[error("counts length {got} does not match signal length {expected}")]
    CountsLength { expected: usize, got: usize },
}

/// Prefix sums of the centered signal for O(1) segment costs.
struct L2Cost {
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl L2Cost {
    fn new(signal: &[f64]) -> Self {
        let m = stats::mean(signal);
        let mut s1 = Vec::with_capacity(signal.len() + 1);
        let mut s2 = Vec::with_capacity(signal.len() + 1);
        s1.push(0.0);
        s2.push(0.0);
        for &x in signal {
            let c = x - m;
            s1.push(s1.last().unwrap() + c);
            s2.push(s2.last().unwrap() + c * c);
        }
        Self { s1, s2 }
    }

    /// Sum of squared deviations from the mean over positions `s..t`.
    fn cost(&self, s: usize, t: usize) -> f64 {
        let n = (t - s) as f64;
        let a = self.s1[t] - self.s1[s];
        (self.s2[t] - self.s2[s] - a * a / n).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    pub n_months: usize,
    pub mean: f64,
    pub within_slope: f64,
    pub cost: f64,
    pub mean_count: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub penalty: f64,
    pub min_segment: usize,
    /// Start positions of every segment after the first.
    pub changepoints: Vec<usize>,
    pub segments: Vec<Segment>,
    pub total_cost: f64,
}

impl Segmentation {
    /// Builds segments and costs for given changepoints.
    pub fn from_changepoints(signal: &[f64], changepoints: &[usize], penalty: f64, min_segment: usize) -> Self {
        let mut bounds = vec![0];
        bounds.extend_from_slice(changepoints);
        bounds.push(signal.len());
        let segments: Vec<Segment> = bounds
            .windows(2)
            .map(|w| {
                let vals = &signal[w[0]..w[1]];
                let mean = stats::mean(vals);
                Segment {
                    start: w[0],
                    end: w[1] - 1,
                    n_months: w[1] - w[0],
                    mean,
                    within_slope: stats::index_slope(vals),
                    cost: vals.iter().map(|x| (x - mean) * (x - mean)).sum(),
                    mean_count: None,
                }
            })
            .collect();
        let total_cost = segments.iter().map(|s| s.cost).sum::<f64>() + penalty * changepoints.len() as f64;
        Self { penalty, min_segment, changepoints: changepoints.to_vec(), segments, total_cost }
    }

    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    /// Changepoint with the largest upward jump in segment mean.
    pub fn main_break(&self) -> Option<usize> {
        self.segments
            .windows(2)
            .zip(&self.changepoints)
            .map(|(w, &cp)| (cp, w[1].mean - w[0].mean))
            .fold(None, |best: Option<(usize, f64)>, (cp, jump)| match best {
                Some((_, b)) if b >= jump => best,
                _ => Some((cp, jump)),
            })
            .map(|(cp, _)| cp)
    }

    /// Segment index covering each position.
    pub fn labels(&self) -> Vec<usize> {
        self.segments.iter().enumerate().flat_map(|(k, s)| std::iter::repeat_n(k, s.n_months)).collect()
    }
}

fn validate(signal: &[f64], penalty: f64, min_segment: usize) -> Result<(), PeltError> {
    if min_segment == 0 {
        return Err(PeltError::InvalidMinSegment);
    }
    if signal.len() < 2 * min_segment {
        return Err(PeltError::SeriesTooShort { n: signal.len(), min_segment });
    }
    if !(penalty > 0.0) || !penalty.is_finite() {
        return Err(PeltError::InvalidPenalty(penalty));
    }
    if signal.iter().any(|x| !x.is_finite()) {
        return Err(PeltError::NonFinite);
    }
    Ok(())
}

/// Globally optimal segmentation minimizing total L2 cost plus `penalty` per changepoint.
pub fn pelt_detect(signal: &[f64], penalty: f64, min_segment: usize) -> Result<Segmentation, PeltError> {
    validate(signal, penalty, min_segment)?;
    let n = signal.len();
    let cost = L2Cost::new(signal);
    let mut f = vec![f64::INFINITY; n + 1];
    let mut last = vec![0usize; n + 1];
    f[0] = -penalty;
    let mut candidates: Vec<usize> = vec![0];

    for t in min_segment..=n {
        if t >= 2 * min_segment {
            // `anchor` has just become a legal last changepoint for every end >= t, so
            // anything it dominates can never win again.
            let anchor = t - min_segment;
            let fa = f[anchor];
            let tol = 1e-9 * (1.0 + fa.abs());
            candidates.retain(|&s| f[s] + cost.cost(s, anchor) <= fa + tol);
            candidates.push(anchor);
        }
        let mut best = f64::INFINITY;
        let mut arg = 0;
        for &s in &candidates {
            let v = f[s] + cost.cost(s, t) + penalty;
            if v < best {
                best = v;
                arg = s;
            }
        }
        f[t] = best;
        last[t] = arg;
    }

    let mut cps = Vec::new();
    let mut t = n;
    while t > 0 {
        let s = last[t];
        if s > 0 {
            cps.push(s);
        }
        t = s;
    }
    cps.reverse();
    Ok(Segmentation::from_changepoints(signal, &cps, penalty, min_segment))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyLevel {
    Conservative,
    Moderate,
    Sensitive,
    Exploratory,
}

impl PenaltyLevel {
    pub fn multiplier(self) -> f64 {
        match self {
            Self::Conservative => 3.0,
            Self::Moderate => 2.0,
            Self::Sensitive => 1.0,
            Self::Exploratory => 0.5,
        }
    }
}

/// `multiplier * ln(n) * variance`.
pub fn penalty_formula(level: PenaltyLevel, n: usize, variance: f64) -> Result<f64, PeltError> {
    if n < 2 {
        return Err(PeltError::SeriesTooShort { n, min_segment: 1 });
    }
    if !(variance > 0.0) {
        return Err(PeltError::InvalidVariance(variance));
    }
    Ok(level.multiplier() * (n as f64).ln() * variance)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub penalty: f64,
    pub n_segments: usize,
    pub changepoints: Vec<usize>,
}

/// A run of consecutive grid values sharing one segment count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub n_segments: usize,
    pub appearances: usize,
    pub rho_lo: f64,
    pub rho_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySweep {
    pub rows: Vec<SweepRow>,
    pub plateaus: Vec<Plateau>,
}

/// Default grid 0.5, 1.0, ..., 10.0.
pub fn default_grid() -> Vec<f64> {
    (1..=20).map(|i| f64::from(i) * 0.5).collect()
}

pub fn penalty_sweep(signal: &[f64], grid: &[f64], min_segment: usize) -> Result<PenaltySweep, PeltError> {
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(PeltError::UnsortedGrid);
    }
    let rows = grid
        .par_iter()
        .map(|&rho| {
            pelt_detect(signal, rho, min_segment).map(|seg| SweepRow {
                penalty: rho,
                n_segments: seg.n_segments(),
                changepoints: seg.changepoints,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut plateaus: Vec<Plateau> = Vec::new();
    for row in &rows {
        match plateaus.last_mut() {
            Some(p) if p.n_segments == row.n_segments => {
                p.appearances += 1;
                p.rho_hi = row.penalty;
            }
            _ => plateaus.push(Plateau {
                n_segments: row.n_segments,
                appearances: 1,
                rho_lo: row.penalty,
                rho_hi: row.penalty,
            }),
        }
    }
    Ok(PenaltySweep { rows, plateaus })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauChoice {
    pub rho_star: f64,
    pub plateau: Plateau,
}

/// Midpoint of the plateau seen at the most grid values; ties go to fewer segments.
pub fn select_by_plateau(sweep: &PenaltySweep) -> Result<PlateauChoice, PeltError> {
    let best = sweep
        .plateaus
        .iter()
        .max_by(|a, b| a.appearances.cmp(&b.appearances).then(b.n_segments.cmp(&a.n_segments)))
        .ok_or(PeltError::EmptySweep)?;
    Ok(PlateauChoice { rho_star: 0.5 * (best.rho_lo + best.rho_hi), plateau: best.clone() })
}

/// Recomputes per-segment statistics and attaches mean counts when given.
pub fn segment_stats(
    signal: &[f64],
    segmentation: &Segmentation,
    counts: Option<&[f64]>,
) -> Result<Segmentation, PeltError> {
    if let Some(c) = counts {
        if c.len() != signal.len() {
            return Err(PeltError::CountsLength { expected: signal.len(), got: c.len() });
        }
    }
    let mut out = Segmentation::from_changepoints(
        signal,
        &segmentation.changepoints,
        segmentation.penalty,
        segmentation.min_segment,
    );
    if let Some(c) = counts {
        for seg in &mut out.segments {
            seg.mean_count = Some(stats::mean(&c[seg.start..=seg.end]));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Quadratic-time optimal partitioning with direct segment sums.
    fn dp_oracle(x: &[f64], penalty: f64, min_seg: usize) -> f64 {
        let n = x.len();
        let seg_cost = |s: usize, t: usize| {
            let m = x[s..t].iter().sum::<f64>() / (t - s) as f64;
            x[s..t].iter().map(|v| (v - m).powi(2)).sum::<f64>()
        };
        let mut f = vec![f64::INFINITY; n + 1];
        f[0] = -penalty;
        for t in min_seg..=n {
            for s in 0..=t - min_seg {
                if f[s].is_finite() {
                    f[t] = f[t].min(f[s] + seg_cost(s, t) + penalty);
                }
            }
        }
        f[n]
    }

    fn random_series(rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = rng.random_range(4..=60);
        let mut level = 0.0;
        (0..n)
            .map(|_| {
                if rng.random_bool(0.1) {
                    level += rng.random_range(-4.0..4.0);
                }
                level + rng.random_range(-1.0..1.0)
            })
            .collect()
    }

    #[test]
    fn constant_is_one_segment() {
        let seg = pelt_detect(&[3.0; 20], 0.1, 2).unwrap();
        assert_eq!(seg.n_segments(), 1);
        assert_eq!(seg.total_cost, 0.0);
    }

    #[test]
    fn clean_step() {
        let mut x = vec![0.0; 50];
        x.extend([5.0; 50]);
        let seg = pelt_detect(&x, 2.0, 2).unwrap();
        assert_eq!(seg.changepoints, vec![50]);
        assert_eq!(seg.main_break(), Some(50));
        assert_eq!(seg.total_cost, 2.0);
    }

    #[test]
    fn matches_exhaustive_dp() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let x = random_series(&mut rng);
            let rho = rng.random_range(0.1..8.0);
            let min_seg = rng.random_range(1..=2);
            let seg = pelt_detect(&x, rho, min_seg).unwrap();
            let oracle = dp_oracle(&x, rho, min_seg);
            assert!((seg.total_cost - oracle).abs() <= 1e-9 * (1.0 + oracle.abs()), "{} vs {oracle}", seg.total_cost);
            assert!(seg.segments.iter().all(|s| s.n_months >= min_seg));
        }
    }

    #[test]
    fn beats_random_segmentations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_series(&mut rng);
        let x = if x.len() < 10 { vec![0.0, 0.1, 0.0, 3.0, 3.1, 2.9, 3.0, 0.0, 0.2, 0.1] } else { x };
        let seg = pelt_detect(&x, 1.5, 2).unwrap();
        for _ in 0..1000 {
            let mut cps = Vec::new();
            let mut pos = 0;
            loop {
                pos += rng.random_range(2..=8);
                if pos + 2 > x.len() {
                    break;
                }
                cps.push(pos);
            }
            let alt = Segmentation::from_changepoints(&x, &cps, 1.5, 2);
            assert!(seg.total_cost <= alt.total_cost + 1e-9);
        }
    }

    #[test]
    fn penalty_levels() {
        let p = penalty_formula(PenaltyLevel::Exploratory, 128, 1.0).unwrap();
        assert!((p - 2.43).abs() < 0.01);
        let c = penalty_formula(PenaltyLevel::Conservative, 128, 1.0).unwrap();
        assert!((c - 6.0 * p).abs() < 1e-12);
        assert!((c - 14.56).abs() < 0.01);
        assert_eq!(penalty_formula(PenaltyLevel::Moderate, 50, 2.0).unwrap(), 2.0 * penalty_formula(PenaltyLevel::Moderate, 50, 1.0).unwrap());
        assert!(penalty_formula(PenaltyLevel::Moderate, 50, 0.0).is_err());
    }

    #[test]
    fn constant_sweep_single_plateau() {
        let sweep = penalty_sweep(&[1.0; 30], &default_grid(), 2).unwrap();
        assert_eq!(sweep.plateaus, vec![Plateau { n_segments: 1, appearances: 20, rho_lo: 0.5, rho_hi: 10.0 }]);
        assert_eq!(select_by_plateau(&sweep).unwrap().rho_star, 5.25);
        assert_eq!(penalty_sweep(&[1.0; 30], &[2.0, 1.0], 2), Err(PeltError::UnsortedGrid));
    }

    #[test]
    fn plateau_rules() {
        let p = |n, a, lo, hi| Plateau { n_segments: n, appearances: a, rho_lo: lo, rho_hi: hi };
        let sweep = PenaltySweep { rows: vec![], plateaus: vec![p(5, 4, 1.0, 2.5), p(3, 10, 3.0, 7.5), p(2, 3, 8.0, 9.0)] };
        let choice = select_by_plateau(&sweep).unwrap();
        assert_eq!(choice.plateau.n_segments, 3);
        assert_eq!(choice.rho_star, 5.25);
        let tie = PenaltySweep { rows: vec![], plateaus: vec![p(4, 5, 1.0, 3.0), p(2, 5, 3.5, 5.5)] };
        assert_eq!(select_by_plateau(&tie).unwrap().plateau.n_segments, 2);
        let single = PenaltySweep { rows: vec![], plateaus: vec![p(3, 1, 2.0, 2.0)] };
        assert_eq!(select_by_plateau(&single).unwrap().rho_star, 2.0);
        let empty = PenaltySweep { rows: vec![], plateaus: vec![] };
        assert_eq!(select_by_plateau(&empty), Err(PeltError::EmptySweep));
    }

    #[test]
    fn two_step_plateau_beats_overfit() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x: Vec<f64> = (0..90)
            .map(|i| {
                let level = if i < 30 { 0.0 } else if i < 60 { 3.0 } else { 0.5 };
                level + rng.random_range(-0.5..0.5)
            })
            .collect();
        let sweep = penalty_sweep(&x, &default_grid(), 2).unwrap();
        let width = |k| sweep.plateaus.iter().filter(|p| p.n_segments == k).map(|p| p.appearances).sum::<usize>();
        assert!(width(3) > width(5));
        assert_eq!(select_by_plateau(&sweep).unwrap().plateau.n_segments, 3);
    }

    #[test]
    fn segment_statistics() {
        let x = [1.0, 2.0, 3.0, 10.0, 10.0];
        let seg = Segmentation::from_changepoints(&x, &[3], 1.0, 2);
        assert_eq!(seg.segments[0].mean, 2.0);
        assert!((seg.segments[0].within_slope - 1.0).abs() < 1e-15);
        let counts = [0.0, 1.0, 2.0, 4.0, 6.0];
        let enriched = segment_stats(&x, &seg, Some(&counts)).unwrap();
        assert_eq!(enriched.segments[0].mean_count, Some(1.0));
        assert_eq!(enriched.segments[1].mean_count, Some(5.0));
        assert_eq!(enriched.labels(), vec![0, 0, 0, 1, 1]);
    }

    #[test]
    fn segment_stats_match_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..2.0)).collect();
        let seg = Segmentation::from_changepoints(&x, &[5, 13, 22, 30], 1.0, 2);
        for s in &seg.segments {
            let vals = &x[s.start..=s.end];
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let sx: f64 = (0..vals.len()).map(|i| i as f64).sum();
            let sxx: f64 = (0..vals.len()).map(|i| (i * i) as f64).sum();
            let sxy: f64 = vals.iter().enumerate().map(|(i, v)| i as f64 * v).sum();
            let slope = (n * sxy - sx * vals.iter().sum::<f64>()) / (n * sxx - sx * sx);
            assert!((s.mean - mean).abs() < 1e-9);
            assert!((s.within_slope - slope).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(pelt_detect(&[1.0, 2.0, 3.0], 1.0, 2), Err(PeltError::SeriesTooShort { .. })));
        assert_eq!(pelt_detect(&[1.0; 6], 0.0, 2), Err(PeltError::InvalidPenalty(0.0)));
        assert_eq!(pelt_detect(&[1.0, f64::NAN, 1.0, 1.0], 1.0, 2), Err(PeltError::NonFinite));
    }

    proptest! {
        #[test]
        fn changepoints_non_increasing_in_penalty(x in prop::collection::vec(-5.0f64..5.0, 6..50)) {
            let sweep = penalty_sweep(&x, &default_grid(), 2).unwrap();
            for w in sweep.rows.windows(2) {
                prop_assert!(w[0].n_segments >= w[1].n_segments);
            }
        }

        #[test]
        fn translation_and_scaling(
            x in prop::collection::vec(-5.0f64..5.0, 6..50),
            shift in -20.0f64..20.0,
            c in 0.2f64..5.0,
            rho in 0.5f64..5.0,
        ) {
            let base = pelt_detect(&x, rho, 2).unwrap();
            let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
            let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
            let a = pelt_detect(&shifted, rho, 2).unwrap();
            let b = pelt_detect(&scaled, rho * c * c, 2).unwrap();
            // Exact ties between segmentations may resolve differently after rounding.
            prop_assert!((a.total_cost - base.total_cost).abs() < 1e-8 * (1.0 + base.total_cost.abs()));
            prop_assert!((b.total_cost - c * c * base.total_cost).abs() < 1e-8 * (1.0 + b.total_cost.abs()));
            if a.changepoints != base.changepoints {
                let alt = Segmentation::from_changepoints(&x, &a.changepoints, rho, 2);
                prop_assert!((alt.total_cost - base.total_cost).abs() < 1e-8 * (1.0 + base.total_cost.abs()));
            }
            if b.changepoints != base.changepoints {
                let alt = Segmentation::from_changepoints(&x, &b.changepoints, rho, 2);
                prop_assert!((alt.total_cost - base.total_cost).abs() < 1e-8 * (1.0 + base.total_cost.abs()));
            }
        }
    }
}
