//! Meta-reporting card: a governance summary assembled only from a sealed
//! run's artifacts and its declaration log. `sources` maps each card field
//! to the artifact it was copied from.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use phasewatch_core::phases::{Phase3, Phase6, PhaseShare, PhaseThresholds, PhaseTimeline};
use phasewatch_core::{MonthIndex, RiskSeries};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::declaration::ExpertDeclaration;
use crate::pipeline::{
    CountModelArtifact, DelayArtifact, ExposureArtifact, ForecastArtifact, HmmArtifact, KmeansArtifact,
    NowcastArtifact, PanelArtifact, PeltArtifact, SegmentationArtifact, TriangulationArtifact,
};
use crate::store::{RunStatus, RunStore, StoreError};

/// Number of most recent phase changes shown.
pub const RECENT_TRANSITIONS: usize = 3;

#[derive(Debug, Error)]
pub enum CardError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("run `{0}` has no phase timeline; the card needs the phases stage")]
    NoTimeline(String),
    #[error("phase timeline is empty")]
    EmptyTimeline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentPhase {
    pub six: Phase6,
    pub three: Phase3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub six: Vec<PhaseShare>,
    pub three: Vec<PhaseShare>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseChange {
    /// First month in the new phase.
    pub month: MonthIndex,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskLevel {
    Low,
    Elevated,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskTrend {
    Falling,
    Flat,
    Rising,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSummary {
    pub z: f64,
    pub slope: f64,
    pub level: RiskLevel,
    pub trend: RiskTrend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSummary {
    pub order: String,
    pub aic: f64,
    pub horizon: usize,
    pub first_month: MonthIndex,
    pub first_point: f64,
    pub first_lower95: f64,
    pub first_upper95: f64,
    pub last_month: MonthIndex,
    pub last_point: f64,
    pub last_lower95: f64,
    pub last_upper95: f64,
    pub last_projected_phase: Phase6,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangulationSummary {
    pub pelt_segments: usize,
    pub pelt_penalty: f64,
    pub main_break: Option<MonthIndex>,
    pub hmm_states: usize,
    pub hmm_degenerate: bool,
    pub kmeans_k: usize,
    pub kmeans_silhouette: Option<f64>,
    pub ari_pelt_hmm: f64,
    pub ari_pelt_kmeans: f64,
    pub nmi_pelt_kmeans: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataQuality {
    pub rejected_rows: usize,
    pub conflicting_dates: usize,
    /// Months inflated by the nowcast.
    pub nowcast_months: Vec<MonthIndex>,
    pub exposure_uncovered: Vec<MonthIndex>,
    pub overdispersion: Option<bool>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaReportCard {
    pub run_id: String,
    pub run_digest: String,
    pub domain: String,
    pub as_of: MonthIndex,
    pub current_phase: CurrentPhase,
    pub distribution: Distribution,
    pub recent_transitions_six: Vec<PhaseChange>,
    pub recent_transitions_three: Vec<PhaseChange>,
    pub risk: RiskSummary,
    pub thresholds: PhaseThresholds,
    pub forecast: Option<ForecastSummary>,
    pub triangulation: Option<TriangulationSummary>,
    pub data_quality: DataQuality,
    pub declarations: Vec<ExpertDeclaration>,
    pub sources: BTreeMap<String, String>,
}

fn recent_changes<T: Copy + PartialEq>(months: &[MonthIndex], labels: &[T], name: impl Fn(T) -> &'static str) -> Vec<PhaseChange> {
    let mut out: Vec<PhaseChange> = labels
        .windows(2)
        .zip(&months[1..])
        .filter(|(w, _)| w[0] != w[1])
        .map(|(w, &m)| PhaseChange { month: m, from: name(w[0]).to_string(), to: name(w[1]).to_string() })
        .collect();
    let keep = out.len().saturating_sub(RECENT_TRANSITIONS);
    out.drain(..keep);
    out
}

pub fn risk_level(z: f64, th: &PhaseThresholds) -> RiskLevel {
    if z < th.theta_low {
        RiskLevel::Low
    } else if z < th.theta_high {
        RiskLevel::Elevated
    } else {
        RiskLevel::High
    }
}

pub fn risk_trend(slope: f64, th: &PhaseThresholds) -> RiskTrend {
    if slope > th.trend_cut {
        RiskTrend::Rising
    } else if slope < -th.trend_cut {
        RiskTrend::Falling
    } else {
        RiskTrend::Flat
    }
}

pub fn emit_card(store: &RunStore, run_id: &str) -> Result<MetaReportCard, CardError> {
    let manifest = store.manifest(run_id)?;
    let tl: PhaseTimeline = store.artifact_opt(run_id, "timeline")?.ok_or_else(|| CardError::NoTimeline(run_id.into()))?;
    let risk: RiskSeries = store.artifact(run_id, "risk")?;
    let last = tl.months.len().checked_sub(1).ok_or(CardError::EmptyTimeline)?;
    let th = tl.thresholds;
    let mut sources = BTreeMap::new();
    let mut src = |field: &str, artifact: &str| {
        sources.insert(field.to_string(), artifact.to_string());
    };
    for f in ["as_of", "current_phase", "distribution", "recent_transitions_six", "recent_transitions_three", "thresholds"] {
        src(f, "timeline");
    }
    src("risk", "risk");

    let risk_pos = risk.position(tl.months[last]).unwrap_or(risk.len() - 1);
    let (z, slope) = (risk.z[risk_pos], risk.slope[risk_pos]);

    let forecast = store.artifact_opt::<ForecastArtifact>(run_id, "forecast")?.and_then(|f| {
        let h = f.band.horizon;
        (h > 0).then(|| ForecastSummary {
            order: f.selection.best.order.to_string(),
            aic: f.selection.best.aic,
            horizon: h,
            first_month: f.months[0],
            first_point: f.band.point[0],
            first_lower95: f.band.lower95[0],
            first_upper95: f.band.upper95[0],
            last_month: f.months[h - 1],
            last_point: f.band.point[h - 1],
            last_lower95: f.band.lower95[h - 1],
            last_upper95: f.band.upper95[h - 1],
            last_projected_phase: f.band.projected_phase[h - 1],
            warnings: f.band.warnings.clone(),
        })
    });
    if forecast.is_some() {
        src("forecast", "forecast");
    }

    let mut flags = Vec::new();
    let seg: Option<SegmentationArtifact> = store.artifact_opt(run_id, "segmentation")?;
    let pelt: Option<PeltArtifact> = store.artifact_opt(run_id, "pelt_sweep")?;
    let hmm: Option<HmmArtifact> = store.artifact_opt(run_id, "hmm")?;
    let km: Option<KmeansArtifact> = store.artifact_opt(run_id, "kmeans")?;
    let tri: Option<TriangulationArtifact> = store.artifact_opt(run_id, "triangulation")?;
    let triangulation = match (seg, pelt, hmm, km, tri) {
        (Some(seg), Some(pelt), Some(hmm), Some(km), Some(tri)) => {
            if hmm.fit.degenerate {
                flags.push(format!("hmm: degenerate state at K={}", hmm.fit.n_states));
            }
            src("triangulation.pelt_segments", "segmentation");
            src("triangulation.main_break", "segmentation");
            src("triangulation.pelt_penalty", "pelt_sweep");
            src("triangulation.hmm_states", "hmm");
            src("triangulation.hmm_degenerate", "hmm");
            src("triangulation.kmeans_k", "kmeans");
            src("triangulation.kmeans_silhouette", "kmeans");
            src("triangulation.ari_pelt_hmm", "triangulation");
            src("triangulation.ari_pelt_kmeans", "triangulation");
            src("triangulation.nmi_pelt_kmeans", "triangulation");
            Some(TriangulationSummary {
                pelt_segments: seg.segmentation.n_segments(),
                pelt_penalty: pelt.choice.rho_star,
                main_break: seg.main_break,
                hmm_states: hmm.fit.n_states,
                hmm_degenerate: hmm.fit.degenerate,
                kmeans_k: km.fit.k,
                kmeans_silhouette: km.fit.silhouette,
                ari_pelt_hmm: tri.pelt_vs_hmm.ari,
                ari_pelt_kmeans: tri.pelt_vs_kmeans.ari,
                nmi_pelt_kmeans: tri.pelt_vs_kmeans.nmi,
            })
        }
        _ => None,
    };

    let panel: PanelArtifact = store.artifact(run_id, "panel")?;
    src("data_quality.rejected_rows", "panel");
    src("data_quality.conflicting_dates", "panel");
    let nowcast_months = match store.artifact_opt::<NowcastArtifact>(run_id, "nowcast")? {
        Some(n) => {
            src("data_quality.nowcast_months", "nowcast");
            n.window_months
        }
        None => Vec::new(),
    };
    if let Some(d) = store.artifact_opt::<DelayArtifact>(run_id, "delay")? {
        for w in &d.selection.best.warnings {
            flags.push(format!("delay: {}", serde_json::to_string(w).unwrap_or_default()));
        }
    }
    let exposure_uncovered = match store.artifact_opt::<ExposureArtifact>(run_id, "exposure")? {
        Some(e) => {
            src("data_quality.exposure_uncovered", "exposure");
            e.coverage.uncovered_months
        }
        None => Vec::new(),
    };
    let overdispersion = store.artifact_opt::<CountModelArtifact>(run_id, "count_model")?.map(|c| {
        src("data_quality.overdispersion", "count_model");
        if !c.fit.converged {
            flags.push("count model: IRLS did not converge".into());
        }
        c.dispersion.overdispersion_flag
    });
    if let RunStatus::Failed { stage, message } = &manifest.status {
        flags.push(format!("run failed at stage {stage}: {message}"));
    }
    src("declarations", "declarations.jsonl");

    Ok(MetaReportCard {
        run_id: manifest.run_id.clone(),
        run_digest: manifest.run_digest.clone(),
        domain: manifest.domain.clone(),
        as_of: tl.months[last],
        current_phase: CurrentPhase { six: tl.six_phase[last], three: tl.three_phase[last] },
        distribution: Distribution { six: tl.distribution_six.clone(), three: tl.distribution_three.clone() },
        recent_transitions_six: recent_changes(&tl.months, &tl.six_phase, Phase6::name),
        recent_transitions_three: recent_changes(&tl.months, &tl.three_phase, Phase3::name),
        risk: RiskSummary { z, slope, level: risk_level(z, &th), trend: risk_trend(slope, &th) },
        thresholds: th,
        forecast,
        triangulation,
        data_quality: DataQuality {
            rejected_rows: panel.rejects.len(),
            conflicting_dates: panel.conflicting_dates.len(),
            nowcast_months,
            exposure_uncovered,
            overdispersion,
            flags,
        },
        declarations: store.declarations(run_id)?,
        sources,
    })
}

fn month_list(ms: &[MonthIndex]) -> String {
    match ms {
        [] => "none".into(),
        [one] => one.to_string(),
        [first, .., last] => format!("{first}..{last} ({} months)", ms.len()),
    }
}

/// Human-readable rendering of a card.
pub fn render_text(card: &MetaReportCard) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "PHASE REPORT CARD: {}", card.domain);
    let _ = writeln!(s, "run {} (digest {})", card.run_id, &card.run_digest[..card.run_digest.len().min(16)]);
    let _ = writeln!(s, "as of {}", card.as_of);
    let _ = writeln!(s);
    let _ = writeln!(s, "Current phase");
    let _ = writeln!(s, "  six-phase:   {}", card.current_phase.six);
    let _ = writeln!(s, "  three-phase: {}", card.current_phase.three);
    let _ = writeln!(
        s,
        "Risk: z = {:+.3}, slope = {:+.3}/month ({:?}, {:?})",
        card.risk.z, card.risk.slope, card.risk.level, card.risk.trend
    );
    let _ = writeln!(
        s,
        "Thresholds: theta_low {:.3}, theta_high {:.3}, rapid {:.3}, SPC epidemic {:.3}",
        card.thresholds.theta_low, card.thresholds.theta_high, card.thresholds.rapid_cut, card.thresholds.spc_epidemic
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "Phase distribution");
    for (title, shares) in [("six-phase", &card.distribution.six), ("three-phase", &card.distribution.three)] {
        let _ = writeln!(s, "  {title}");
        for share in shares.iter().filter(|sh| sh.months > 0) {
            let _ = writeln!(s, "    {:<24} {:>4} months {:>6.1}%", share.phase, share.months, share.percent);
        }
    }
    let _ = writeln!(s, "Recent transitions");
    if card.recent_transitions_six.is_empty() {
        let _ = writeln!(s, "  none");
    }
    for c in &card.recent_transitions_six {
        let _ = writeln!(s, "  {}: {} -> {}", c.month, c.from, c.to);
    }
    if let Some(f) = &card.forecast {
        let _ = writeln!(s);
        let _ = writeln!(s, "Forecast {} over {} months", f.order, f.horizon);
        let _ = writeln!(s, "  {}: {:.3} [{:.3}, {:.3}]", f.first_month, f.first_point, f.first_lower95, f.first_upper95);
        let _ = writeln!(
            s,
            "  {}: {:.3} [{:.3}, {:.3}] projected {}",
            f.last_month, f.last_point, f.last_lower95, f.last_upper95, f.last_projected_phase
        );
        for w in &f.warnings {
            let _ = writeln!(s, "  warning: {w}");
        }
    }
    if let Some(t) = &card.triangulation {
        let _ = writeln!(s);
        let _ = writeln!(s, "Triangulation");
        let brk = t.main_break.map_or("none".into(), |m| m.to_string());
        let _ = writeln!(s, "  PELT: {} segments at penalty {:.2}, main break {}", t.pelt_segments, t.pelt_penalty, brk);
        let _ = writeln!(s, "  HMM: {} states{}", t.hmm_states, if t.hmm_degenerate { " (degenerate)" } else { "" });
        let sil = t.kmeans_silhouette.map_or("n/a".into(), |v| format!("{v:.3}"));
        let _ = writeln!(s, "  k-means: K = {}, silhouette {}", t.kmeans_k, sil);
        let _ = writeln!(
            s,
            "  ARI PELT/HMM {:.3}, ARI PELT/k-means {:.3}, NMI PELT/k-means {:.3}",
            t.ari_pelt_hmm, t.ari_pelt_kmeans, t.nmi_pelt_kmeans
        );
    }
    let q = &card.data_quality;
    let _ = writeln!(s);
    let _ = writeln!(s, "Data quality");
    let _ = writeln!(s, "  rejected rows {}, conflicting dates {}", q.rejected_rows, q.conflicting_dates);
    let _ = writeln!(s, "  nowcast window: {}", month_list(&q.nowcast_months));
    let _ = writeln!(s, "  exposure gaps: {}", month_list(&q.exposure_uncovered));
    if let Some(o) = q.overdispersion {
        let _ = writeln!(s, "  overdispersion: {}", if o { "yes" } else { "no" });
    }
    for f in &q.flags {
        let _ = writeln!(s, "  flag: {f}");
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "Declarations: {}", card.declarations.len());
    for d in &card.declarations {
        let _ = writeln!(s, "  {} by {}: {} ({})", d.timestamp, d.analyst_id, d.declared_phase, d.rationale);
    }
    s
}
