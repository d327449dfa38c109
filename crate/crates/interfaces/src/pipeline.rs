//! Staged pipeline: ingest, delay, exposure, count model, regimes, phases,
//! forecast, then the optional impact, agreement and sweep stages.
//!
//! Every stage appends serialized artifacts to an ordered map. A failing
//! stage stops the run; artifacts produced before it are kept.

use std::collections::BTreeMap;
use std::path::Path;

use phasewatch_core::agreement::{self, AgreementError, AgreementReport, PartitionAgreement};
use phasewatch_core::delay::{self, DelayError, DelaySelection, NowcastAdjustment};
use phasewatch_core::exposure::{self, Coverage, ExposureError, ExposureIndex, ExposureSource, StarEvent};
use phasewatch_core::forecast::{self, AdfResult, ArimaSelection, ForecastBand, ForecastContext, ForecastError};
use phasewatch_core::glm::{self, AlphaGrid, CountFamily, CountModelFit, DispersionDiagnostics, GlmError, LikelihoodRatio};
use phasewatch_core::impact::{self, EffectConfusion, ImpactError, ImpactResult};
use phasewatch_core::ingest::{self, IncidentRecord, IngestError, RejectedRow};
use phasewatch_core::model::ModelError;
use phasewatch_core::pelt::{self, PeltError, PenaltySweep, PlateauChoice, Segmentation};
use phasewatch_core::phases::{self, Framework, Phase3, PhaseError, PhaseThresholds, PhaseTimeline, SegmentPhases};
use phasewatch_core::sensitivity::{self, BreakPipeline, BreakSweep, SensitivityError, ThresholdSweep, TwoThresholdSweep};
use phasewatch_core::stats;
use phasewatch_core::triangulate::{self, ClusterFit, HmmFit, HmmSelection, KmeansSelection, MacroBands, TriangulateError};
use phasewatch_core::{MonthIndex, MonthlyPanel, RiskSeries, SeverityScale};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{
    resolve, ExposureStage, FamilySpec, ForecastTarget, MonthWindow, PipelineConfig, Stage, ThresholdSpec,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Delay(#[from] DelayError),
    #[error(transparent)]
    Exposure(#[from] ExposureError),
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Pelt(#[from] PeltError),
    #[error(transparent)]
    Triangulate(#[from] TriangulateError),
    #[error(transparent)]
    Phase(#[from] PhaseError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Impact(#[from] ImpactError),
    #[error(transparent)]
    Agreement(#[from] AgreementError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("missing input `{0}`")]
    MissingInput(&'static str),
    #[error("needs output of stage `{0}`")]
    MissingUpstream(Stage),
    #[error("excess-risk signal is constant; nothing to standardize")]
    DegenerateRisk,
    #[error("window {start}..{end} holds {got} months of risk")]
    ShortWindow { start: MonthIndex, end: MonthIndex, got: usize },
    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

/// Panel plus ingestion bookkeeping. Later stages overwrite the panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelArtifact {
    pub panel: MonthlyPanel,
    pub records_loaded: usize,
    pub records_kept: usize,
    pub rejects: Vec<RejectedRow>,
    pub conflicting_dates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayArtifact {
    pub selection: DelaySelection,
    pub lags_total: usize,
    pub lags_excluded: usize,
    pub lags_zero: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NowcastArtifact {
    pub adjustment: NowcastAdjustment,
    pub as_of: MonthIndex,
    /// Panel months whose counts were inflated.
    pub window_months: Vec<MonthIndex>,
    pub factors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureArtifact {
    pub index: ExposureIndex,
    pub coverage: Coverage,
    pub media_attached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountModelArtifact {
    pub fit: CountModelFit,
    pub dispersion: DispersionDiagnostics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_grid: Option<AlphaGrid>,
    /// Poisson against the fitted negative binomial.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub likelihood_ratio: Option<LikelihoodRatio>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcessArtifact {
    pub months: Vec<MonthIndex>,
    pub excess: Vec<f64>,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeltArtifact {
    pub sweep: PenaltySweep,
    pub choice: PlateauChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationArtifact {
    pub months: Vec<MonthIndex>,
    pub segmentation: Segmentation,
    pub main_break: Option<MonthIndex>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmArtifact {
    pub selection: HmmSelection,
    pub fit: HmmFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmeansArtifact {
    pub selection: KmeansSelection,
    pub fit: ClusterFit,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bands: Option<MacroBands>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangulationArtifact {
    pub pelt_vs_hmm: PartitionAgreement,
    pub pelt_vs_kmeans: PartitionAgreement,
    pub hmm_vs_kmeans: PartitionAgreement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPhasesArtifact {
    pub months: Vec<MonthIndex>,
    pub thresholds: PhaseThresholds,
    pub six: SegmentPhases,
    pub three: SegmentPhases,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastArtifact {
    pub target: ForecastTarget,
    pub months: Vec<MonthIndex>,
    pub selection: ArimaSelection,
    pub band: ForecastBand,
    pub adf: Option<AdfResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adf_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactArtifact {
    pub events: Vec<ImpactResult>,
    pub waves: Vec<ImpactResult>,
    pub confusion: EffectConfusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementArtifact {
    pub months: Vec<MonthIndex>,
    pub primary_counts: Vec<f64>,
    pub comparison_counts: Vec<f64>,
    pub comparison_phase: Vec<Phase3>,
    pub report: AgreementReport,
}

/// Artifact names in the order stages may emit them.
pub const ARTIFACT_NAMES: [&str; 21] = [
    "panel",
    "delay",
    "nowcast",
    "exposure",
    "count_model",
    "excess_risk",
    "risk",
    "pelt_sweep",
    "segmentation",
    "hmm",
    "kmeans",
    "triangulation",
    "timeline",
    "segment_phases",
    "forecast",
    "impact",
    "agreement",
    "sweep_threshold",
    "sweep_two_threshold",
    "sweep_half_life",
    "sweep_alpha",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct PipelineOutcome {
    /// Serialized JSON per artifact name.
    pub artifacts: BTreeMap<String, Vec<u8>>,
    pub stages_run: Vec<Stage>,
    pub failure: Option<StageFailure>,
}

impl PipelineOutcome {
    pub fn artifact<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Option<T> {
        self.artifacts.get(name).and_then(|b| serde_json::from_slice(b).ok())
    }
}

#[derive(Default)]
struct State {
    records: Vec<IncidentRecord>,
    panel: Option<PanelArtifact>,
    star_events: Option<Vec<StarEvent>>,
    family: Option<CountFamily>,
    risk: Option<RiskSeries>,
    segmentation: Option<Segmentation>,
    thresholds: Option<PhaseThresholds>,
    timeline: Option<PhaseTimeline>,
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    base: &'a Path,
    out: BTreeMap<String, Vec<u8>>,
    st: State,
}

/// Executes configured stages in order, stopping after `until` when given.
pub fn execute(cfg: &PipelineConfig, base: &Path, until: Option<Stage>) -> PipelineOutcome {
    let mut r = Runner { cfg, base, out: BTreeMap::new(), st: State::default() };
    let mut stages_run = Vec::new();
    let mut failure = None;
    for stage in Stage::ALL {
        if until.is_some_and(|u| stage > u) {
            break;
        }
        if !cfg.is_configured(stage) {
            continue;
        }
        log::info!("stage {stage}");
        if let Err(e) = r.run(stage) {
            log::error!("stage {stage} failed: {e}");
            failure = Some(StageFailure { stage, message: e.to_string() });
            break;
        }
        stages_run.push(stage);
    }
    PipelineOutcome { artifacts: r.out, stages_run, failure }
}

/// Raw counts of `panel` at each of `months`.
pub fn counts_at(panel: &MonthlyPanel, months: &[MonthIndex]) -> Result<Vec<f64>, PhaseError> {
    months
        .iter()
        .map(|&m| panel.position(m).map(|i| panel.raw_count[i] as f64).ok_or(PhaseError::MissingMonth(m)))
        .collect()
}

fn window_values(risk: &RiskSeries, w: &MonthWindow) -> Result<Vec<f64>, PipelineError> {
    let vals: Vec<f64> = risk.months.iter().zip(&risk.z).filter(|(m, _)| w.contains(**m)).map(|(_, z)| *z).collect();
    if vals.is_empty() {
        return Err(PipelineError::ShortWindow { start: w.start, end: w.end, got: 0 });
    }
    Ok(vals)
}

impl Runner<'_> {
    fn put<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), PipelineError> {
        self.out.insert(name.to_string(), serde_json::to_vec_pretty(value)?);
        Ok(())
    }

    fn input(&self, role: &'static str, p: Option<&Path>) -> Result<std::path::PathBuf, PipelineError> {
        p.map(|p| resolve(self.base, p)).ok_or(PipelineError::MissingInput(role))
    }

    fn panel(&self) -> Result<&PanelArtifact, PipelineError> {
        self.st.panel.as_ref().ok_or(PipelineError::MissingUpstream(Stage::Ingest))
    }

    fn set_panel(&mut self, panel: MonthlyPanel) -> Result<(), PipelineError> {
        let mut art = self.panel()?.clone();
        art.panel = panel;
        self.put("panel", &art)?;
        self.st.panel = Some(art);
        Ok(())
    }

    fn risk(&self) -> Result<&RiskSeries, PipelineError> {
        self.st.risk.as_ref().ok_or(PipelineError::MissingUpstream(Stage::Glm))
    }

    fn thresholds(&self) -> Result<&PhaseThresholds, PipelineError> {
        self.st.thresholds.as_ref().ok_or(PipelineError::MissingUpstream(Stage::Phases))
    }

    fn run(&mut self, stage: Stage) -> Result<(), PipelineError> {
        match stage {
            Stage::Ingest => self.ingest(),
            Stage::Delay => self.delay(),
            Stage::Exposure => self.exposure(),
            Stage::Glm => self.glm(),
            Stage::Regimes => self.regimes(),
            Stage::Phases => self.phases(),
            Stage::Forecast => self.forecast(),
            Stage::Impact => self.impact(),
            Stage::Agreement => self.agreement(),
            Stage::Sweeps => self.sweeps(),
        }
    }

    fn ingest(&mut self) -> Result<(), PipelineError> {
        let spec = &self.cfg.ingest;
        let corpus = ingest::load_incidents_path(&resolve(self.base, &self.cfg.inputs.incidents))?;
        let scale = SeverityScale::default();
        let kept = ingest::filter_records(&corpus.records, &spec.filter, spec.basis)?.len();
        let panel = match (spec.start, spec.end) {
            (Some(s), Some(e)) => ingest::aggregate_monthly_in(&corpus.records, &spec.filter, spec.basis, &scale, s, e)?,
            _ => ingest::aggregate_monthly(&corpus.records, &spec.filter, spec.basis, &scale)?,
        };
        let art = PanelArtifact {
            panel,
            records_loaded: corpus.records.len(),
            records_kept: kept,
            rejects: corpus.rejects,
            conflicting_dates: corpus.conflicting_dates,
        };
        self.put("panel", &art)?;
        self.st.panel = Some(art);
        self.st.records = corpus.records;
        Ok(())
    }

    fn delay(&mut self) -> Result<(), PipelineError> {
        let spec = self.cfg.delay.clone().expect("configured");
        let basis = self.cfg.ingest.basis;
        let kept: Vec<IncidentRecord> =
            ingest::filter_records(&self.st.records, &self.cfg.ingest.filter, basis)?.into_iter().cloned().collect();
        let lags = delay::first_report_lags(&kept);
        let selection = delay::select_delay_model(&lags)?;
        let adjustment = delay::build_nowcast(&lags.lag_months(spec.convention), spec.percentile, spec.cap)?;
        let panel = &self.panel()?.panel;
        let last = panel.last_month().ok_or(PipelineError::MissingUpstream(Stage::Ingest))?;
        let as_of = spec.as_of.unwrap_or(last);
        let corrected = delay::apply_nowcast(panel, &adjustment, as_of)?;
        let (window_months, factors): (Vec<_>, Vec<_>) = panel
            .months
            .iter()
            .filter_map(|m| {
                let h = m.months_until(as_of);
                (h <= i64::from(adjustment.window_months)).then(|| (*m, adjustment.factor(h as u32)))
            })
            .unzip();
        self.put(
            "delay",
            &DelayArtifact { selection, lags_total: lags.total, lags_excluded: lags.excluded, lags_zero: lags.zero_count() },
        )?;
        self.put("nowcast", &NowcastArtifact { adjustment, as_of, window_months, factors })?;
        self.set_panel(corrected)
    }

    fn exposure(&mut self) -> Result<(), PipelineError> {
        let spec = self.cfg.exposure.clone().expect("configured");
        let panel = self.panel()?.panel.clone();
        let (start, end) = match (panel.first_month(), panel.last_month()) {
            (Some(s), Some(e)) => (s, e),
            _ => return Err(PipelineError::MissingUpstream(Stage::Ingest)),
        };
        let index = match spec {
            ExposureStage::External => {
                let pairs = ingest::load_exposure_path(&self.input("exposure", self.cfg.inputs.exposure.as_deref())?)?;
                let (months, value) = pairs.into_iter().unzip();
                ExposureIndex { months, value, source: ExposureSource::External, half_life_months: None, scale_range: None }
            }
            ExposureStage::InstalledBase { half_life_months, scale } => {
                let events =
                    ingest::load_star_events_path(&self.input("star_events", self.cfg.inputs.star_events.as_deref())?)?;
                let raw = exposure::depreciated_installed_base(&events, half_life_months, start, end)?;
                self.st.star_events = Some(events);
                exposure::scale_range(&raw, scale.0, scale.1)?
            }
        };
        let (mut merged, coverage) = exposure::merge_external(&panel, &index.pairs())?;
        let media_attached = match self.cfg.inputs.media.as_deref() {
            Some(p) => {
                let media = ingest::load_media_path(&resolve(self.base, p))?;
                merged = exposure::attach_media(&merged, &media)?;
                true
            }
            None => false,
        };
        self.put("exposure", &ExposureArtifact { index, coverage, media_attached })?;
        self.set_panel(merged)
    }

    fn glm(&mut self) -> Result<(), PipelineError> {
        let spec = self.cfg.glm.clone().expect("configured");
        let panel = self.panel()?.panel.clone();
        let (family, alpha_grid) = match &spec.family {
            FamilySpec::Poisson => (CountFamily::Poisson, None),
            FamilySpec::NegBin { alpha } => (CountFamily::NegBin { alpha: *alpha }, None),
            FamilySpec::NegBinGrid { grid } => {
                let g = glm::alpha_grid_search(&panel, spec.formula, grid)?;
                (CountFamily::NegBin { alpha: g.alpha_star }, Some(g))
            }
        };
        let fit = glm::fit_count_model(&panel, spec.formula, family)?;
        let likelihood_ratio = match family {
            CountFamily::NegBin { .. } => glm::fit_count_model(&panel, spec.formula, CountFamily::Poisson)
                .ok()
                .and_then(|p| glm::likelihood_ratio_test(&p, &fit).ok()),
            CountFamily::Poisson => None,
        };
        let excess = glm::excess_risk(&fit, spec.epsilon)?;
        let risk = excess.standardized.clone().ok_or(PipelineError::DegenerateRisk)?;
        self.put(
            "count_model",
            &CountModelArtifact { dispersion: glm::dispersion_diagnostics(&fit), fit, alpha_grid, likelihood_ratio },
        )?;
        self.put("excess_risk", &ExcessArtifact { months: excess.months, excess: excess.excess, epsilon: excess.epsilon })?;
        self.put("risk", &risk)?;
        self.st.family = Some(family);
        self.st.risk = Some(risk);
        Ok(())
    }

    fn regimes(&mut self) -> Result<(), PipelineError> {
        let spec = self.cfg.regimes.clone().expect("configured");
        let seed = self.cfg.seed;
        let risk = self.risk()?.clone();
        let counts = counts_at(&self.panel()?.panel, &risk.months)?;
        let z = &risk.z;

        let sweep = pelt::penalty_sweep(z, &spec.penalty_grid, spec.min_segment)?;
        let choice = pelt::select_by_plateau(&sweep)?;
        let seg = pelt::pelt_detect(z, choice.rho_star, spec.min_segment)?;
        let seg = pelt::segment_stats(z, &seg, Some(&counts))?;
        let main_break = seg.main_break().map(|p| risk.months[p]);

        let states: Vec<usize> = spec.hmm_states.iter().copied().filter(|&k| k <= z.len()).collect();
        let selection = triangulate::hmm_select(z, &states, seed, &spec.hmm)?;
        let hmm = triangulate::hmm_fit_with(z, selection.k_star, seed, &spec.hmm)?;

        let ks: Vec<usize> = spec.kmeans_k.iter().copied().filter(|&k| k <= z.len()).collect();
        let ksel = triangulate::kmeans_select(&risk, &ks, spec.trend_weight, seed)?;
        let kfit = triangulate::kmeans_fit(&risk, ksel.k_star, spec.trend_weight, seed)?;
        let bands = spec.macro_cuts.map(|(lo, hi)| triangulate::macro_bands(&kfit, lo, hi)).transpose()?;

        let pelt_labels = seg.labels();
        let tri = TriangulationArtifact {
            pelt_vs_hmm: agreement::partition_agreement(&pelt_labels, &hmm.states)?,
            pelt_vs_kmeans: agreement::partition_agreement(&pelt_labels, &kfit.labels)?,
            hmm_vs_kmeans: agreement::partition_agreement(&hmm.states, &kfit.labels)?,
        };

        self.put("pelt_sweep", &PeltArtifact { sweep, choice })?;
        self.put("segmentation", &SegmentationArtifact { months: risk.months.clone(), segmentation: seg.clone(), main_break })?;
        self.put("hmm", &HmmArtifact { selection, fit: hmm })?;
        self.put("kmeans", &KmeansArtifact { selection: ksel, fit: kfit, bands })?;
        self.put("triangulation", &tri)?;
        self.st.segmentation = Some(seg);
        Ok(())
    }

    fn phases(&mut self) -> Result<(), PipelineError> {
        let spec = self.cfg.phases.clone().expect("configured");
        let risk = self.risk()?.clone();
        let (lo, hi) = match &spec.thresholds {
            ThresholdSpec::Fixed { theta_low, theta_high } => (*theta_low, *theta_high),
            ThresholdSpec::Calibrated { reference } => phases::calibrate_thresholds(&window_values(&risk, reference)?)?,
        };
        let mut th = PhaseThresholds::new(lo, hi)?;
        if let Some(w) = &spec.spc_baseline {
            th = th.with_spc_baseline(&window_values(&risk, w)?)?;
        }
        th = th.with_rapid_cut(spec.rapid_cut.unwrap_or_else(|| phases::rapid_cut(&risk.slope)));
        let tl = phases::timeline(&self.panel()?.panel, &risk, &th)?;
        self.put("timeline", &tl)?;
        if let Some(seg) = &self.st.segmentation {
            let art = SegmentPhasesArtifact {
                months: risk.months.clone(),
                thresholds: th,
                six: phases::classify_segments(seg, &th, Framework::Six)?,
                three: phases::classify_segments(seg, &th, Framework::Three)?,
            };
            self.put("segment_phases", &art)?;
        }
        self.st.thresholds = Some(th);
        self.st.timeline = Some(tl);
        Ok(())
    }

    fn forecast(&mut self) -> Result<(), PipelineError> {
        let spec = self.cfg.forecast.clone().expect("configured");
        let risk = self.risk()?.clone();
        let th = *self.thresholds()?;
        let (series, ctx) = match spec.target {
            ForecastTarget::Risk => (risk.z.clone(), ForecastContext { mean: 0.0, sd: 1.0, series_is_count: false }),
            ForecastTarget::Counts => {
                let panel = &self.panel()?.panel;
                let s: Vec<f64> = risk
                    .months
                    .iter()
                    .map(|&m| panel.position(m).map(|i| panel.nowcast_count[i]).ok_or(PhaseError::MissingMonth(m)))
                    .collect::<Result<_, _>>()?;
                let ctx = ForecastContext {
                    mean: stats::mean(&s),
                    sd: stats::population_variance(&s).sqrt(),
                    series_is_count: true,
                };
                (s, ctx)
            }
        };
        let selection = forecast::arima_select(&series, &spec.orders)?;
        let band = forecast::forecast(&selection.best, spec.horizon, &th, &ctx)?;
        let last = *risk.months.last().ok_or(PipelineError::MissingUpstream(Stage::Glm))?;
        let months = (1..=spec.horizon as i64).map(|h| last.add_months(h)).collect();
        let (adf, adf_error) = match forecast::adf_test(&series, spec.adf_lag) {
            Ok(a) => (Some(a), None),
            Err(e) => (None, Some(e.to_string())),
        };
        self.put("forecast", &ForecastArtifact { target: spec.target, months, selection, band, adf, adf_error })
    }

    fn impact(&mut self) -> Result<(), PipelineError> {
        let spec = self.cfg.impact.clone().expect("configured");
        let events = ingest::load_interventions_path(&self.input("interventions", self.cfg.inputs.interventions.as_deref())?)?;
        let risk = self.risk()?;
        let results = impact::assess_events(risk, &events, spec.window, spec.fdr)?;
        let waves = if events.iter().any(|e| e.wave.is_some()) {
            impact::wave_impact(risk, &events, spec.window, spec.fdr)?
        } else {
            Vec::new()
        };
        let confusion = impact::expected_vs_actual(&results, spec.rule);
        self.put("impact", &ImpactArtifact { events: results, waves, confusion })
    }

    fn agreement(&mut self) -> Result<(), PipelineError> {
        let spec = self.cfg.agreement.clone().expect("configured");
        let corpus = ingest::load_incidents_path(&self.input("comparison", self.cfg.inputs.comparison.as_deref())?)?;
        let risk = self.risk()?.clone();
        let th = *self.thresholds()?;
        let (start, end) = match (risk.months.first(), risk.months.last()) {
            (Some(s), Some(e)) => (*s, *e),
            _ => return Err(PipelineError::MissingUpstream(Stage::Glm)),
        };
        let cmp = ingest::aggregate_monthly_in(
            &corpus.records,
            &spec.filter,
            self.cfg.ingest.basis,
            &SeverityScale::default(),
            start,
            end,
        )?;
        let a = counts_at(&self.panel()?.panel, &risk.months)?;
        let b = counts_at(&cmp, &risk.months)?;
        let cmp_risk = RiskSeries::from_signal(risk.months.clone(), &b)?;
        let comparison_phase = cmp_risk
            .z
            .iter()
            .zip(&cmp_risk.slope)
            .map(|(&r, &t)| phases::classify_three(r, t, &th))
            .collect::<Result<Vec<_>, _>>()?;
        let primary = &self.st.timeline.as_ref().ok_or(PipelineError::MissingUpstream(Stage::Phases))?.three_phase;
        let report =
            agreement::agreement_report(&a, &b, primary, &comparison_phase, spec.max_lag, spec.exclude.as_ref())?;
        self.put(
            "agreement",
            &AgreementArtifact { months: risk.months, primary_counts: a, comparison_counts: b, comparison_phase, report },
        )
    }

    fn break_pipeline(&self) -> BreakPipeline {
        let mut bp = BreakPipeline::default();
        if let Some(g) = &self.cfg.glm {
            bp.formula = g.formula;
            bp.epsilon = g.epsilon;
        }
        if let Some(r) = &self.cfg.regimes {
            bp.penalty_grid = r.penalty_grid.clone();
            bp.min_segment = r.min_segment;
        }
        if let Some(ExposureStage::InstalledBase { scale, .. }) = &self.cfg.exposure {
            bp.exposure_scale = *scale;
        }
        bp
    }

    fn sweeps(&mut self) -> Result<(), PipelineError> {
        let spec = self.cfg.sweeps.clone().expect("configured");
        let th = *self.thresholds()?;
        if let Some(grid) = &spec.threshold_grid {
            let seg = self.st.segmentation.as_ref().ok_or(PipelineError::MissingUpstream(Stage::Regimes))?;
            let sweep: ThresholdSweep = sensitivity::threshold_sweep(seg, grid, &th, spec.framework)?;
            self.put("sweep_threshold", &sweep)?;
        }
        if let Some(g) = &spec.two_threshold {
            let risk = self.risk()?;
            let counts = counts_at(&self.panel()?.panel, &risk.months)?;
            let sweep: TwoThresholdSweep =
                sensitivity::two_threshold_sweep(&counts, &risk.z, &risk.slope, &g.low, &g.high, &th)?;
            self.put("sweep_two_threshold", &sweep)?;
        }
        let family = self.st.family.ok_or(PipelineError::MissingUpstream(Stage::Glm))?;
        let bp = self.break_pipeline();
        if let Some(hl) = &spec.half_lives {
            let events = match self.st.star_events.clone() {
                Some(e) => e,
                None => ingest::load_star_events_path(&self.input("star_events", self.cfg.inputs.star_events.as_deref())?)?,
            };
            let sweep: BreakSweep = sensitivity::halflife_sweep(&events, &self.panel()?.panel, hl, family, &bp)?;
            self.put("sweep_half_life", &sweep)?;
        }
        if let Some(alphas) = &spec.alphas {
            let sweep: BreakSweep = sensitivity::dispersion_sweep(&self.panel()?.panel, alphas, &bp)?;
            self.put("sweep_alpha", &sweep)?;
        }
        Ok(())
    }
}
