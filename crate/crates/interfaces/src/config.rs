//! Run configuration: a single JSON document naming the input files and the
//! stages to execute. Absent stages are skipped. Relative paths resolve
//! against the directory holding the config (or the server's data root).

use std::fmt;
use std::path::{Path, PathBuf};

use phasewatch_core::delay::{LagMonthConvention, DEFAULT_CAP, DEFAULT_PERCENTILE};
use phasewatch_core::exposure::DEFAULT_SCALE;
use phasewatch_core::forecast::{self, ArimaOrder, DEFAULT_HORIZON};
use phasewatch_core::glm::{Formula, EXCESS_EPSILON};
use phasewatch_core::impact::{ActualEffectRule, FdrMethod, WAVE_WINDOW};
use phasewatch_core::ingest::{CorpusFilter, CountBasis};
use phasewatch_core::pelt::{self, DEFAULT_MIN_SEGMENT};
use phasewatch_core::phases::{Framework, Phase3};
use phasewatch_core::triangulate::{HmmConfig, DEFAULT_TREND_WEIGHT};
use phasewatch_core::MonthIndex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Delay,
    Exposure,
    Glm,
    Regimes,
    Phases,
    Forecast,
    Impact,
    Agreement,
    Sweeps,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Ingest,
        Stage::Delay,
        Stage::Exposure,
        Stage::Glm,
        Stage::Regimes,
        Stage::Phases,
        Stage::Forecast,
        Stage::Impact,
        Stage::Agreement,
        Stage::Sweeps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Delay => "delay",
            Stage::Exposure => "exposure",
            Stage::Glm => "glm",
            Stage::Regimes => "regimes",
            Stage::Phases => "phases",
            Stage::Forecast => "forecast",
            Stage::Impact => "impact",
            Stage::Agreement => "agreement",
            Stage::Sweeps => "sweeps",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Domain label carried onto cards and declarations.
    pub domain: String,
    /// Master seed for every stochastic stage.
    #[serde(default)]
    pub seed: u64,
    pub inputs: Inputs,
    #[serde(default)]
    pub ingest: IngestStage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay: Option<DelayStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exposure: Option<ExposureStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub glm: Option<GlmStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regimes: Option<RegimeStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phases: Option<PhaseStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forecast: Option<ForecastStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impact: Option<ImpactStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement: Option<AgreementStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweeps: Option<SweepStage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    /// Incident CSV.
    pub incidents: PathBuf,
    /// `month,exposure` CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exposure: Option<PathBuf>,
    /// `month,index` CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media: Option<PathBuf>,
    /// `repo,event_month,stars_added` CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub star_events: Option<PathBuf>,
    /// `name,month,type,expected_effect[,wave]` CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interventions: Option<PathBuf>,
    /// Second incident CSV compared against the primary stream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<PathBuf>,
}

impl Inputs {
    /// `(role, path)` for every declared input.
    pub fn declared(&self) -> Vec<(&'static str, &Path)> {
        let mut out = vec![("incidents", self.incidents.as_path())];
        let optional = [
            ("exposure", &self.exposure),
            ("media", &self.media),
            ("star_events", &self.star_events),
            ("interventions", &self.interventions),
            ("comparison", &self.comparison),
        ];
        out.extend(optional.into_iter().filter_map(|(role, p)| p.as_deref().map(|p| (role, p))));
        out
    }
}

fn default_basis() -> CountBasis {
    CountBasis::IncidentDate
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestStage {
    pub filter: CorpusFilter,
    #[serde(default = "default_basis")]
    pub basis: CountBasis,
    /// Fixed panel range; both bounds or neither.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start: Option<MonthIndex>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub end: Option<MonthIndex>,
}

impl Default for IngestStage {
    fn default() -> Self {
        Self { filter: CorpusFilter::default(), basis: default_basis(), start: None, end: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelayStage {
    pub convention: LagMonthConvention,
    pub percentile: f64,
    pub cap: f64,
    /// Data snapshot month; defaults to the last panel month.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub as_of: Option<MonthIndex>,
}

impl Default for DelayStage {
    fn default() -> Self {
        Self { convention: LagMonthConvention::default(), percentile: DEFAULT_PERCENTILE, cap: DEFAULT_CAP, as_of: None }
    }
}

fn default_scale() -> (f64, f64) {
    DEFAULT_SCALE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExposureStage {
    /// Denominator from `inputs.exposure`.
    External,
    /// Half-life-depreciated cumulative stars from `inputs.star_events`.
    InstalledBase {
        half_life_months: f64,
        #[serde(default = "default_scale")]
        scale: (f64, f64),
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    Poisson,
    #[serde(rename = "negbin")]
    NegBin { alpha: f64 },
    /// Dispersion chosen by profile likelihood over the grid.
    #[serde(rename = "negbin_grid")]
    NegBinGrid { grid: Vec<f64> },
}

fn default_formula() -> Formula {
    Formula { time_linear: true, time_quadratic: false, media: false, offset: true }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlmStage {
    pub formula: Formula,
    pub family: FamilySpec,
    pub epsilon: f64,
}

impl Default for GlmStage {
    fn default() -> Self {
        Self { formula: default_formula(), family: FamilySpec::NegBin { alpha: 1.0 }, epsilon: EXCESS_EPSILON }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegimeStage {
    pub penalty_grid: Vec<f64>,
    pub min_segment: usize,
    pub hmm_states: Vec<usize>,
    pub hmm: HmmConfig,
    pub kmeans_k: Vec<usize>,
    pub trend_weight: f64,
    /// Low/high cuts on centroid risk for macro bands.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_cuts: Option<(f64, f64)>,
}

impl Default for RegimeStage {
    fn default() -> Self {
        Self {
            penalty_grid: pelt::default_grid(),
            min_segment: DEFAULT_MIN_SEGMENT,
            hmm_states: vec![1, 2, 3, 4],
            hmm: HmmConfig::default(),
            kmeans_k: (2..=6).collect(),
            trend_weight: DEFAULT_TREND_WEIGHT,
            macro_cuts: None,
        }
    }
}

/// Inclusive month window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonthWindow {
    pub start: MonthIndex,
    pub end: MonthIndex,
}

impl MonthWindow {
    pub fn contains(&self, m: MonthIndex) -> bool {
        self.start <= m && m <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdSpec {
    Fixed { theta_low: f64, theta_high: f64 },
    /// Mean + 1 sd and mean + 2 sd of the risk inside a dormant reference window.
    Calibrated { reference: MonthWindow },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseStage {
    pub thresholds: ThresholdSpec,
    /// Control-chart baseline; unit limits at zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spc_baseline: Option<MonthWindow>,
    /// Fixed rapid-growth cut; otherwise P75 of slopes, floored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rapid_cut: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastTarget {
    /// Standardized excess risk.
    #[default]
    Risk,
    /// Nowcast-corrected monthly counts.
    Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastStage {
    pub horizon: usize,
    pub target: ForecastTarget,
    pub orders: Vec<ArimaOrder>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adf_lag: Option<usize>,
}

impl Default for ForecastStage {
    fn default() -> Self {
        Self { horizon: DEFAULT_HORIZON, target: ForecastTarget::default(), orders: forecast::default_grid(), adf_lag: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImpactStage {
    pub window: u32,
    pub fdr: FdrMethod,
    pub rule: ActualEffectRule,
}

impl Default for ImpactStage {
    fn default() -> Self {
        Self { window: WAVE_WINDOW, fdr: FdrMethod::default(), rule: ActualEffectRule::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgreementStage {
    /// Filter for the comparison corpus.
    pub filter: CorpusFilter,
    pub max_lag: usize,
    /// Phase dropped from the primary side for the restricted agreement.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exclude: Option<Phase3>,
}

impl Default for AgreementStage {
    fn default() -> Self {
        Self { filter: CorpusFilter::default(), max_lag: phasewatch_core::agreement::DEFAULT_MAX_LAG, exclude: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoThresholdGrid {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepStage {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold_grid: Option<Vec<f64>>,
    pub framework: Framework,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub two_threshold: Option<TwoThresholdGrid>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub half_lives: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<f64>>,
}

/// Sweep axes that produce a `sweep_<axis>` artifact.
pub const SWEEP_AXES: [&str; 4] = ["threshold", "two_threshold", "half_life", "alpha"];

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; the returned directory anchors relative input paths.
    pub fn load(path: &Path) -> Result<(Self, PathBuf), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let cfg = Self::from_json(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn is_configured(&self, stage: Stage) -> bool {
        match stage {
            Stage::Ingest => true,
            Stage::Delay => self.delay.is_some(),
            Stage::Exposure => self.exposure.is_some(),
            Stage::Glm => self.glm.is_some(),
            Stage::Regimes => self.regimes.is_some(),
            Stage::Phases => self.phases.is_some(),
            Stage::Forecast => self.forecast.is_some(),
            Stage::Impact => self.impact.is_some(),
            Stage::Agreement => self.agreement.is_some(),
            Stage::Sweeps => self.sweeps.is_some(),
        }
    }

    /// Structural checks that need no input data.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.domain.trim().is_empty() {
            return Err(invalid("domain must be non-empty"));
        }
        match (self.ingest.start, self.ingest.end) {
            (Some(s), Some(e)) if s > e => return Err(invalid(format!("ingest.start {s} is after ingest.end {e}"))),
            (Some(_), None) | (None, Some(_)) => return Err(invalid("ingest.start and ingest.end must be given together")),
            _ => {}
        }
        self.ingest.filter.validate().map_err(|e| invalid(e.to_string()))?;
        let needs = |stage: Stage, dep: Stage| -> Result<(), ConfigError> {
            if self.is_configured(stage) && !self.is_configured(dep) {
                return Err(invalid(format!("stage `{stage}` requires stage `{dep}`")));
            }
            Ok(())
        };
        needs(Stage::Regimes, Stage::Glm)?;
        needs(Stage::Phases, Stage::Glm)?;
        needs(Stage::Forecast, Stage::Phases)?;
        needs(Stage::Impact, Stage::Glm)?;
        needs(Stage::Agreement, Stage::Phases)?;
        needs(Stage::Sweeps, Stage::Phases)?;
        if let Some(glm) = &self.glm {
            if glm.formula.offset && self.exposure.is_none() {
                return Err(invalid("an exposure offset requires stage `exposure`"));
            }
            if glm.formula.media && self.inputs.media.is_none() {
                return Err(invalid("a media term requires inputs.media"));
            }
            if !(glm.epsilon > 0.0) {
                return Err(invalid("glm.epsilon must be positive"));
            }
        }
        match &self.exposure {
            Some(ExposureStage::External) if self.inputs.exposure.is_none() => {
                return Err(invalid("external exposure requires inputs.exposure"))
            }
            Some(ExposureStage::InstalledBase { .. }) if self.inputs.star_events.is_none() => {
                return Err(invalid("installed-base exposure requires inputs.star_events"))
            }
            _ => {}
        }
        if self.impact.is_some() && self.inputs.interventions.is_none() {
            return Err(invalid("stage `impact` requires inputs.interventions"));
        }
        if self.agreement.is_some() && self.inputs.comparison.is_none() {
            return Err(invalid("stage `agreement` requires inputs.comparison"));
        }
        if let Some(r) = &self.regimes {
            if r.penalty_grid.is_empty() || r.hmm_states.is_empty() || r.kmeans_k.is_empty() {
                return Err(invalid("regime grids must be non-empty"));
            }
        }
        if let Some(f) = &self.forecast {
            if f.orders.is_empty() || f.horizon == 0 {
                return Err(invalid("forecast needs at least one order and a positive horizon"));
            }
        }
        if let Some(s) = &self.sweeps {
            if s.threshold_grid.is_some() && self.regimes.is_none() {
                return Err(invalid("a threshold sweep requires stage `regimes`"));
            }
            if s.half_lives.is_some() && self.inputs.star_events.is_none() {
                return Err(invalid("a half-life sweep requires inputs.star_events"));
            }
            if (s.half_lives.is_some() || s.alphas.is_some()) && self.regimes.is_none() {
                return Err(invalid("break sweeps require stage `regimes`"));
            }
        }
        Ok(())
    }
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{"domain": "test", "inputs": {"incidents": "x.csv"}}"#
    }

    #[test]
    fn minimal_config_has_only_ingest() {
        let cfg = PipelineConfig::from_json(minimal()).unwrap();
        assert_eq!(Stage::ALL.iter().filter(|&&s| cfg.is_configured(s)).count(), 1);
        assert_eq!(cfg.ingest.basis, CountBasis::IncidentDate);
        assert_eq!(cfg.seed, 0);
    }

    #[test]
    fn round_trips_through_json() {
        let text = r#"{
            "domain": "d", "seed": 7,
            "inputs": {"incidents": "i.csv", "star_events": "s.csv"},
            "delay": {},
            "exposure": {"source": "installed_base", "half_life_months": 12},
            "glm": {"formula": {"offset": true}, "family": {"family": "negbin_grid", "grid": [0.5, 1.0]}},
            "regimes": {"hmm_states": [2]},
            "phases": {"thresholds": {"method": "fixed", "theta_low": 0.14, "theta_high": 0.54}},
            "forecast": {"horizon": 6, "orders": [{"p": 0, "d": 1, "q": 1}]}
        }"#;
        let cfg = PipelineConfig::from_json(text).unwrap();
        assert_eq!(cfg.exposure, Some(ExposureStage::InstalledBase { half_life_months: 12.0, scale: DEFAULT_SCALE }));
        let again = PipelineConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn dependency_errors() {
        let bad = [
            r#"{"domain": "d", "inputs": {"incidents": "i"}, "regimes": {}}"#,
            r#"{"domain": "d", "inputs": {"incidents": "i"}, "glm": {}}"#,
            r#"{"domain": "", "inputs": {"incidents": "i"}}"#,
            r#"{"domain": "d", "inputs": {"incidents": "i"}, "ingest": {"start": "2020-01"}}"#,
            r#"{"domain": "d", "inputs": {"incidents": "i"}, "exposure": {"source": "external"}}"#,
            r#"{"domain": "d", "inputs": {"incidents": "i"}, "bogus": 1}"#,
        ];
        for text in bad {
            assert!(PipelineConfig::from_json(text).is_err(), "{text}");
        }
    }

    #[test]
    fn declared_inputs_in_fixed_order() {
        let cfg = PipelineConfig::from_json(
            r#"{"domain": "d", "inputs": {"incidents": "i", "comparison": "c", "exposure": "e"}}"#,
        )
        .unwrap();
        let roles: Vec<_> = cfg.inputs.declared().into_iter().map(|(r, _)| r).collect();
        assert_eq!(roles, ["incidents", "exposure", "comparison"]);
    }
}
