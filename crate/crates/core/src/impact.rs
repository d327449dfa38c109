//! Before/after intervention tests with false-discovery-rate control.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{MonthIndex, RiskSeries};
use crate::stats;

pub const SIGNIFICANCE: f64 = 0.05;
pub const WAVE_WINDOW: u32 = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImpactError {
    #[error("event `{event}`: need at least 2 months on each side, got {pre} before and {post} after")]
    InsufficientWindow { event: String, pre: usize, post: usize },
    #[error("window must be at least 1 month")]
    ZeroWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionType {
    Fatal,
    Regulatory,
    Company,
    Deployment,
    Platform,
    Standards,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedEffect {
    Mitigation,
    Shock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionEvent {
    pub name: String,
    pub month: MonthIndex,
    #[serde(rename = "type")]
    pub kind: InterventionType,
    pub expected_effect: ExpectedEffect,
    #[serde(default)]
    pub wave: Option<String>,
    #[serde(default)]
    pub window_months: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Mitigation,
    Deterioration,
    None,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdrMethod {
    /// Benjamini-Hochberg.
    #[default]
    Bh,
    /// Benjamini-Yekutieli, valid under arbitrary dependence.
    By,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactResult {
    pub event: String,
    pub anchor: MonthIndex,
    pub window: u32,
    pub pre_n: usize,
    pub post_n: usize,
    pub pre_mean: f64,
    pub post_mean: f64,
    pub delta: f64,
    pub t_stat: f64,
    pub df: f64,
    pub p_raw: f64,
    pub p_fdr: f64,
    pub fdr_method: FdrMethod,
    pub direction: Direction,
    /// A window ran past the series edge.
    pub truncated: bool,
    pub expected_effect: Option<ExpectedEffect>,
}

fn direction(delta: f64, p: f64) -> Direction {
    if p < SIGNIFICANCE && delta < 0.0 {
        Direction::Mitigation
    } else if p < SIGNIFICANCE && delta > 0.0 {
        Direction::Deterioration
    } else {
        Direction::None
    }
}

/// Welch test of `[m - w, m - 1]` against `[m, m + w - 1]`, the event month
/// opening the post window. Direction uses the raw p-value until an FDR pass.
pub fn event_impact(
    risk: &RiskSeries,
    name: &str,
    anchor: MonthIndex,
    window: u32,
) -> Result<ImpactResult, ImpactError> {
    if window == 0 {
        return Err(ImpactError::ZeroWindow);
    }
    let w = i64::from(window);
    let mut pre = Vec::new();
    let mut post = Vec::new();
    for (month, &z) in risk.months.iter().zip(&risk.z) {
        let k = anchor.months_until(*month);
        if (-w..0).contains(&k) {
            pre.push(z);
        } else if (0..w).contains(&k) {
            post.push(z);
        }
    }
    let test = stats::welch_t_test(&pre, &post).ok_or_else(|| ImpactError::InsufficientWindow {
        event: name.to_string(),
        pre: pre.len(),
        post: post.len(),
    })?;
    let delta = test.mean_b - test.mean_a;
    Ok(ImpactResult {
        event: name.to_string(),
        anchor,
        window,
        pre_n: pre.len(),
        post_n: post.len(),
        pre_mean: test.mean_a,
        post_mean: test.mean_b,
        delta,
        t_stat: test.t_stat,
        df: test.df,
        p_raw: test.p_value,
        p_fdr: test.p_value,
        fdr_method: FdrMethod::Bh,
        direction: direction(delta, test.p_value),
        truncated: pre.len() < window as usize || post.len() < window as usize,
        expected_effect: None,
    })
}

/// Step-up adjusted p-values, monotone and clipped to 1, in input order.
pub fn fdr_adjust(p: &[f64], method: FdrMethod) -> Vec<f64> {
    let m = p.len();
    if m == 0 {
        return Vec::new();
    }
    let c = match method {
        FdrMethod::Bh => 1.0,
        FdrMethod::By => (1..=m).map(|i| 1.0 / i as f64).sum(),
    };
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = f64::INFINITY;
    for rank in (0..m).rev() {
        let i = order[rank];
        let candidate = p[i] * c * m as f64 / (rank + 1) as f64;
        // Exact arithmetic never drops below the raw value; rounding of p * m / m can.
        running = running.min(candidate).max(p[i]);
        adjusted[i] = running.min(1.0);
    }
    adjusted
}

fn finalize(results: &mut [ImpactResult], method: FdrMethod) {
    let raw: Vec<f64> = results.iter().map(|r| r.p_raw).collect();
    for (r, q) in results.iter_mut().zip(fdr_adjust(&raw, method)) {
        r.p_fdr = q;
        r.fdr_method = method;
        r.direction = direction(r.delta, q);
    }
}

/// Tests every event, then assigns directions from FDR-adjusted p-values.
/// Events without an explicit window use `default_window`.
pub fn assess_events(
    risk: &RiskSeries,
    events: &[InterventionEvent],
    default_window: u32,
    method: FdrMethod,
) -> Result<Vec<ImpactResult>, ImpactError> {
    let mut results = events
        .iter()
        .map(|ev| {
            let mut r = event_impact(risk, &ev.name, ev.month, ev.window_months.unwrap_or(default_window))?;
            r.expected_effect = Some(ev.expected_effect);
            Ok(r)
        })
        .collect::<Result<Vec<_>, ImpactError>>()?;
    finalize(&mut results, method);
    Ok(results)
}

/// Anchors each wave at its earliest event and tests it with a common window.
pub fn wave_impact(
    risk: &RiskSeries,
    events: &[InterventionEvent],
    window: u32,
    method: FdrMethod,
) -> Result<Vec<ImpactResult>, ImpactError> {
    let mut anchors: BTreeMap<&str, MonthIndex> = BTreeMap::new();
    for ev in events {
        if let Some(w) = ev.wave.as_deref() {
            let slot = anchors.entry(w).or_insert(ev.month);
            *slot = (*slot).min(ev.month);
        }
    }
    let mut results = anchors
        .iter()
        .map(|(wave, &anchor)| event_impact(risk, wave, anchor, window))
        .collect::<Result<Vec<_>, _>>()?;
    finalize(&mut results, method);
    Ok(results)
}

/// How an observed effect is labeled for the expected-vs-actual table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ActualEffectRule {
    /// Significant after FDR: mitigation or shock; otherwise neutral.
    #[default]
    PostCorrection,
    /// Sign of delta outside `[-deadband, deadband]`, ignoring significance.
    SignWithDeadband { deadband: f64 },
}

pub const ACTUAL_LABELS: [&str; 3] = ["mitigation", "neutral", "shock"];
pub const EXPECTED_LABELS: [&str; 2] = ["mitigation", "shock"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectConfusion {
    pub rule: ActualEffectRule,
    /// Rows: expected mitigation, shock. Columns: actual mitigation, neutral, shock.
    pub counts: [[usize; 3]; 2],
    pub row_totals: [usize; 2],
    pub column_totals: [usize; 3],
    pub total: usize,
    /// Results without an expected effect are not tabulated.
    pub unlabeled: usize,
}

fn actual_column(r: &ImpactResult, rule: ActualEffectRule) -> usize {
    match rule {
        ActualEffectRule::PostCorrection => match r.direction {
            Direction::Mitigation => 0,
            Direction::None => 1,
            Direction::Deterioration => 2,
        },
        ActualEffectRule::SignWithDeadband { deadband } => {
            if r.delta < -deadband {
                0
            } else if r.delta > deadband {
                2
            } else {
                1
            }
        }
    }
}

pub fn expected_vs_actual(results: &[ImpactResult], rule: ActualEffectRule) -> EffectConfusion {
    let mut counts = [[0usize; 3]; 2];
    let mut unlabeled = 0;
    for r in results {
        let row = match r.expected_effect {
            Some(ExpectedEffect::Mitigation) => 0,
            Some(ExpectedEffect::Shock) => 1,
            None => {
                unlabeled += 1;
                continue;
            }
        };
        counts[row][actual_column(r, rule)] += 1;
    }
    let row_totals = [counts[0].iter().sum(), counts[1].iter().sum()];
    let column_totals = [0, 1, 2].map(|c| counts[0][c] + counts[1][c]);
    EffectConfusion { rule, counts, row_totals, column_totals, total: row_totals[0] + row_totals[1], unlabeled }
}
