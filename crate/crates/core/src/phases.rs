//! Governance phases from (risk, trend): six-phase rules, the simplified
//! three-phase rules with control-chart limits, threshold calibration,
//! transition matrices and marginal distributions.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{MonthIndex, MonthlyPanel, RiskSeries};
use crate::pelt::Segmentation;
use crate::stats;

pub const TREND_CUT: f64 = 0.05;
pub const RAPID_FLOOR: f64 = 0.05;
/// Segment mean monthly count below which nothing is considered evidenced.
pub const SEGMENT_ZERO_RULE: f64 = 0.5;
pub const MIN_REFERENCE_MONTHS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhaseError {
    #[error("thresholds must satisfy theta_low < theta_high, got {low} and {high}")]
    InvalidThresholds { low: f64, high: f64 },
    #[error("control-chart sd must be positive, got {0}")]
    InvalidSpcSd(f64),
    #[error("classification input is not finite")]
    NonFinite,
    #[error("reference window has {0} months, need at least {MIN_REFERENCE_MONTHS}")]
    WindowTooShort(usize),
    #[error("reference window has zero spread")]
    ZeroSpread,
    #[error("no rule matched (r={risk}, trend={trend})")]
    Unclassifiable { risk: f64, trend: f64 },
    #[error("month {0} is missing from the panel")]
    MissingMonth(MonthIndex),
    #[error("six-phase segment classification needs segment mean counts")]
    MissingCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase6 {
    NoEvidencedOccurrence,
    RareMitigated,
    RareOccurrence,
    EndemicMitigated,
    RapidExpansion,
    EndemicUnmitigated,
}

impl Phase6 {
    pub const ALL: [Phase6; 6] = [
        Phase6::NoEvidencedOccurrence,
        Phase6::RareMitigated,
        Phase6::RareOccurrence,
        Phase6::EndemicMitigated,
        Phase6::RapidExpansion,
        Phase6::EndemicUnmitigated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::NoEvidencedOccurrence => "No Evidenced Occurrence",
            Self::RareMitigated => "Rare Mitigated",
            Self::RareOccurrence => "Rare Occurrence",
            Self::EndemicMitigated => "Endemic Mitigated",
            Self::RapidExpansion => "Rapid Expansion",
            Self::EndemicUnmitigated => "Endemic Unmitigated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase3 {
    DormantBaseline,
    EndemicUnmitigated,
    ActiveOutbreak,
}

impl Phase3 {
    pub const ALL: [Phase3; 3] = [Phase3::DormantBaseline, Phase3::EndemicUnmitigated, Phase3::ActiveOutbreak];

    pub fn name(self) -> &'static str {
        match self {
            Self::DormantBaseline => "Dormant Baseline",
            Self::EndemicUnmitigated => "Endemic Unmitigated",
            Self::ActiveOutbreak => "Active Outbreak",
        }
    }
}

impl fmt::Display for Phase6 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Phase3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    Six,
    #[default]
    Three,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "framework", content = "phase", rename_all = "snake_case")]
pub enum PhaseLabel {
    Six(Phase6),
    Three(Phase3),
}

impl fmt::Display for PhaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Six(p) => p.fmt(f),
            Self::Three(p) => p.fmt(f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseThresholds {
    pub theta_low: f64,
    pub theta_high: f64,
    pub trend_cut: f64,
    pub rapid_cut: f64,
    pub spc_mean: f64,
    pub spc_sd: f64,
    pub spc_epidemic: f64,
    pub spc_acute: f64,
    pub zero_count_rule: f64,
}

impl PhaseThresholds {
    /// Control-chart limits default to a unit-sd baseline at zero.
    pub fn new(theta_low: f64, theta_high: f64) -> Result<Self, PhaseError> {
        if !theta_low.is_finite() || !theta_high.is_finite() || !(theta_low < theta_high) {
            return Err(PhaseError::InvalidThresholds { low: theta_low, high: theta_high });
        }
        Ok(Self {
            theta_low,
            theta_high,
            trend_cut: TREND_CUT,
            rapid_cut: RAPID_FLOOR,
            spc_mean: 0.0,
            spc_sd: 1.0,
            spc_epidemic: 2.0,
            spc_acute: 3.0,
            zero_count_rule: SEGMENT_ZERO_RULE,
        })
    }

    pub fn with_spc(mut self, mean: f64, sd: f64) -> Result<Self, PhaseError> {
        if !(sd > 0.0) || !sd.is_finite() || !mean.is_finite() {
            return Err(PhaseError::InvalidSpcSd(sd));
        }
        self.spc_mean = mean;
        self.spc_sd = sd;
        self.spc_epidemic = mean + 2.0 * sd;
        self.spc_acute = mean + 3.0 * sd;
        Ok(self)
    }

    /// Control-chart limits from a baseline window (population sd).
    pub fn with_spc_baseline(self, baseline: &[f64]) -> Result<Self, PhaseError> {
        if baseline.len() < 2 {
            return Err(PhaseError::WindowTooShort(baseline.len()));
        }
        self.with_spc(stats::mean(baseline), stats::population_variance(baseline).sqrt())
    }

    pub fn with_rapid_cut(mut self, rapid: f64) -> Self {
        self.rapid_cut = rapid;
        self
    }
}

fn six_rules(no_evidence: bool, r: f64, tau: f64, th: &PhaseThresholds) -> Result<Phase6, PhaseError> {
    if !r.is_finite() || !tau.is_finite() {
        return Err(PhaseError::NonFinite);
    }
    let flat = tau <= th.trend_cut;
    if no_evidence {
        Ok(Phase6::NoEvidencedOccurrence)
    } else if r < th.theta_low && flat {
        Ok(Phase6::RareMitigated)
    } else if r < th.theta_low && !flat {
        Ok(Phase6::RareOccurrence)
    } else if r >= th.theta_low && r < th.theta_high && flat {
        Ok(Phase6::EndemicMitigated)
    } else if !flat {
        Ok(Phase6::RapidExpansion)
    } else if r >= th.theta_high && flat {
        Ok(Phase6::EndemicUnmitigated)
    } else {
        Err(PhaseError::Unclassifiable { risk: r, trend: tau })
    }
}

/// First matching row in table order; a month with zero count is not evidenced.
pub fn classify_six(count: f64, r: f64, tau: f64, th: &PhaseThresholds) -> Result<Phase6, PhaseError> {
    if !count.is_finite() {
        return Err(PhaseError::NonFinite);
    }
    six_rules(count == 0.0, r, tau, th)
}

pub fn classify_three(r: f64, tau: f64, th: &PhaseThresholds) -> Result<Phase3, PhaseError> {
    if !r.is_finite() || !tau.is_finite() {
        return Err(PhaseError::NonFinite);
    }
    Ok(if r >= th.spc_epidemic || tau > th.rapid_cut {
        Phase3::ActiveOutbreak
    } else if r >= th.theta_low {
        Phase3::EndemicUnmitigated
    } else {
        Phase3::DormantBaseline
    })
}

/// `(mu + sd, mu + 2 sd)`.
pub fn thresholds_from_moments(mu: f64, sd: f64) -> (f64, f64) {
    (mu + sd, mu + 2.0 * sd)
}

/// Thresholds from the mean and population sd of a dormant reference window.
pub fn calibrate_thresholds(reference: &[f64]) -> Result<(f64, f64), PhaseError> {
    if reference.len() < MIN_REFERENCE_MONTHS {
        return Err(PhaseError::WindowTooShort(reference.len()));
    }
    if reference.iter().any(|v| !v.is_finite()) {
        return Err(PhaseError::NonFinite);
    }
    let sd = stats::population_variance(reference).sqrt();
    if !(sd > 0.0) {
        return Err(PhaseError::ZeroSpread);
    }
    Ok(thresholds_from_moments(stats::mean(reference), sd))
}

/// `max(P75(slopes), 0.05)` with type-7 interpolation.
pub fn rapid_cut(slopes: &[f64]) -> f64 {
    if slopes.is_empty() {
        return RAPID_FLOOR;
    }
    stats::quantile(slopes, 0.75).max(RAPID_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseShare {
    pub phase: String,
    pub months: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub states: Vec<String>,
    pub counts: Vec<Vec<usize>>,
    /// Rows without departures stay zero.
    pub probabilities: Vec<Vec<f64>>,
}

fn distribution<T: Copy + Eq>(labels: &[T], all: &[T], name: impl Fn(T) -> &'static str) -> Vec<PhaseShare> {
    let n = labels.len();
    all.iter()
        .map(|&p| {
            let m = labels.iter().filter(|&&l| l == p).count();
            PhaseShare { phase: name(p).to_string(), months: m, percent: if n > 0 { 100.0 * m as f64 / n as f64 } else { 0.0 } }
        })
        .collect()
}

fn transitions<T: Copy + Eq>(labels: &[T], all: &[T], name: impl Fn(T) -> &'static str) -> TransitionMatrix {
    let k = all.len();
    let idx = |p: T| all.iter().position(|&q| q == p).expect("phase in list");
    let mut counts = vec![vec![0usize; k]; k];
    for w in labels.windows(2) {
        counts[idx(w[0])][idx(w[1])] += 1;
    }
    let probabilities = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter().map(|&c| if total > 0 { c as f64 / total as f64 } else { 0.0 }).collect()
        })
        .collect();
    TransitionMatrix { states: all.iter().map(|&p| name(p).to_string()).collect(), counts, probabilities }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimeline {
    pub months: Vec<MonthIndex>,
    pub six_phase: Vec<Phase6>,
    pub three_phase: Vec<Phase3>,
    pub thresholds: PhaseThresholds,
    pub distribution_six: Vec<PhaseShare>,
    pub distribution_three: Vec<PhaseShare>,
    pub transitions_six: TransitionMatrix,
    pub transitions_three: TransitionMatrix,
}

pub fn six_distribution(labels: &[Phase6]) -> Vec<PhaseShare> {
    distribution(labels, &Phase6::ALL, Phase6::name)
}

pub fn three_distribution(labels: &[Phase3]) -> Vec<PhaseShare> {
    distribution(labels, &Phase3::ALL, Phase3::name)
}

pub fn six_transitions(labels: &[Phase6]) -> TransitionMatrix {
    transitions(labels, &Phase6::ALL, Phase6::name)
}

pub fn three_transitions(labels: &[Phase3]) -> TransitionMatrix {
    transitions(labels, &Phase3::ALL, Phase3::name)
}

/// Month-level labels under both frameworks, counts taken from the panel.
pub fn timeline(panel: &MonthlyPanel, risk: &RiskSeries, th: &PhaseThresholds) -> Result<PhaseTimeline, PhaseError> {
    let mut six = Vec::with_capacity(risk.len());
    let mut three = Vec::with_capacity(risk.len());
    for (t, &m) in risk.months.iter().enumerate() {
        let pos = panel.position(m).ok_or(PhaseError::MissingMonth(m))?;
        six.push(classify_six(panel.raw_count[pos] as f64, risk.z[t], risk.slope[t], th)?);
        three.push(classify_three(risk.z[t], risk.slope[t], th)?);
    }
    Ok(PhaseTimeline {
        months: risk.months.clone(),
        distribution_six: six_distribution(&six),
        distribution_three: three_distribution(&three),
        transitions_six: six_transitions(&six),
        transitions_three: three_transitions(&three),
        six_phase: six,
        three_phase: three,
        thresholds: *th,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPhase {
    pub start: usize,
    pub end: usize,
    pub mean: f64,
    pub slope: f64,
    pub mean_count: Option<f64>,
    pub phase: PhaseLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPhases {
    pub framework: Framework,
    pub segments: Vec<SegmentPhase>,
    pub month_labels: Vec<PhaseLabel>,
}

/// Labels each segment from its mean risk and within-segment slope.
pub fn classify_segments(seg: &Segmentation, th: &PhaseThresholds, framework: Framework) -> Result<SegmentPhases, PhaseError> {
    let segments = seg
        .segments
        .iter()
        .map(|s| {
            let phase = match framework {
                Framework::Three => PhaseLabel::Three(classify_three(s.mean, s.within_slope, th)?),
                Framework::Six => {
                    let c = s.mean_count.ok_or(PhaseError::MissingCounts)?;
                    PhaseLabel::Six(six_rules(c < th.zero_count_rule, s.mean, s.within_slope, th)?)
                }
            };
            Ok(SegmentPhase { start: s.start, end: s.end, mean: s.mean, slope: s.within_slope, mean_count: s.mean_count, phase })
        })
        .collect::<Result<Vec<_>, PhaseError>>()?;
    let month_labels = segments.iter().flat_map(|s| std::iter::repeat_n(s.phase, s.end - s.start + 1)).collect();
    Ok(SegmentPhases { framework, segments, month_labels })
}
