//! Seeded synthetic corpora with known structure, written in the same CSV
//! layouts the pipeline ingests. Two shapes are provided: a repository-star
//! exposure stream with a single upward step in excess risk, and an
//! external-exposure stream with three risk regimes, media, interventions
//! and a second reporting source.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use phasewatch_core::exposure::{self, StarEvent};
use phasewatch_core::impact::{ExpectedEffect, InterventionEvent, InterventionType};
use phasewatch_core::ingest::{self, IncidentRecord};
use phasewatch_core::MonthIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};

/// File names used by [`SyntheticCorpus::write_to`].
pub const INCIDENTS_FILE: &str = "incidents.csv";
pub const STARS_FILE: &str = "star_events.csv";
pub const EXPOSURE_FILE: &str = "exposure.csv";
pub const MEDIA_FILE: &str = "media.csv";
pub const INTERVENTIONS_FILE: &str = "interventions.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";

#[derive(Debug, Clone, Default)]
pub struct SyntheticCorpus {
    pub months: Vec<MonthIndex>,
    pub incidents: Vec<IncidentRecord>,
    pub star_events: Vec<StarEvent>,
    pub exposure: Vec<(MonthIndex, f64)>,
    pub media: Vec<(MonthIndex, f64)>,
    pub interventions: Vec<InterventionEvent>,
    pub comparison: Vec<IncidentRecord>,
    /// Expected incidents per month before truncation.
    pub intensity: Vec<f64>,
    /// Occurred incidents per month, including those not yet reported.
    pub true_counts: Vec<u64>,
}

fn last_day(m: MonthIndex) -> NaiveDate {
    m.add_months(1).first_day() - Duration::days(1)
}

fn days_in(m: MonthIndex) -> i64 {
    (m.add_months(1).first_day() - m.first_day()).num_days()
}

/// Reporting lag model: lognormal days to first report, optional follow-up.
#[derive(Debug, Clone, Copy)]
pub struct LagModel {
    pub median_days: f64,
    pub sigma: f64,
    pub followup_prob: f64,
}

impl Default for LagModel {
    fn default() -> Self {
        Self { median_days: 20.0, sigma: 1.0, followup_prob: 0.3 }
    }
}

/// Draws incidents month by month; anything first reported after `snapshot` is withheld.
fn draw_incidents(
    rng: &mut ChaCha8Rng,
    prefix: &str,
    months: &[MonthIndex],
    intensity: &[f64],
    lag: LagModel,
    snapshot: NaiveDate,
    tag: &str,
) -> (Vec<IncidentRecord>, Vec<u64>) {
    let lags = LogNormal::new(lag.median_days.ln(), lag.sigma).expect("valid lognormal");
    let mut out = Vec::new();
    let mut truth = Vec::with_capacity(months.len());
    let severities = ["negligible", "minor", "substantial", "severe"];
    for (i, (&m, &lam)) in months.iter().zip(intensity).enumerate() {
        let n = if lam > 0.0 { Poisson::new(lam).expect("positive rate").sample(rng) as u64 } else { 0 };
        truth.push(n);
        for j in 0..n {
            let day = m.first_day() + Duration::days(rng.random_range(0..days_in(m)));
            let first = day + Duration::days(lags.sample(rng).round() as i64);
            if first > snapshot {
                continue;
            }
            let mut reports = vec![first];
            if rng.random_bool(lag.followup_prob) {
                let later = first + Duration::days(rng.random_range(1..120));
                if later <= snapshot {
                    reports.push(later);
                }
            }
            let sev = severities[rng.random_range(0..severities.len())];
            out.push(IncidentRecord {
                incident_id: format!("{prefix}-{i:03}-{j:03}"),
                incident_date: day,
                report_dates: reports,
                subdomain_tags: BTreeSet::from([tag.to_string()]),
                severity: Some(sev.parse().expect("known level")),
                group: Some(format!("g{}", rng.random_range(0..3))),
                description: Some(format!("synthetic {tag} incident")),
            });
        }
    }
    (out, truth)
}

/// Step-in-excess-risk corpus with a repository-star denominator.
#[derive(Debug, Clone)]
pub struct StepSpec {
    pub start: MonthIndex,
    pub n_months: usize,
    /// Position of the first elevated month.
    pub step_at: usize,
    /// Incidents per unit of scaled exposure before and after the step.
    pub pre_rate: f64,
    pub post_rate: f64,
    pub half_life_months: f64,
    pub lag: LagModel,
    pub seed: u64,
}

impl Default for StepSpec {
    fn default() -> Self {
        Self {
            start: MonthIndex::new(2017, 1).expect("valid"),
            n_months: 103,
            step_at: 60,
            pre_rate: 0.03,
            post_rate: 0.12,
            half_life_months: 12.0,
            lag: LagModel::default(),
            seed: 0,
        }
    }
}

pub fn step_corpus(spec: &StepSpec) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let end = spec.start.add_months(spec.n_months as i64 - 1);
    let months = MonthIndex::range_inclusive(spec.start, end);
    let repos = ["faceswap", "voiceclone", "lipsync"];
    let noise = Normal::new(0.0, 0.15).expect("valid");
    let mut star_events = Vec::new();
    for (t, &m) in months.iter().enumerate() {
        for (r, repo) in repos.iter().enumerate() {
            let base = 40.0 * (1.0 + r as f64) + 6.0 * t as f64;
            let stars = (base * (1.0 + noise.sample(&mut rng))).max(0.0).round();
            star_events.push(StarEvent { repo: repo.to_string(), event_month: m, stars_added: stars });
        }
    }
    let idx = exposure::depreciated_installed_base(&star_events, spec.half_life_months, spec.start, end)
        .expect("valid half-life");
    let scaled = exposure::scale_range(&idx, exposure::DEFAULT_SCALE.0, exposure::DEFAULT_SCALE.1).expect("non-constant");
    let intensity: Vec<f64> = scaled
        .value
        .iter()
        .enumerate()
        .map(|(t, e)| e * if t < spec.step_at { spec.pre_rate } else { spec.post_rate })
        .collect();
    let (incidents, true_counts) =
        draw_incidents(&mut rng, "df", &months, &intensity, spec.lag, last_day(end), "deepfake");
    SyntheticCorpus { months, incidents, star_events, intensity, true_counts, ..Default::default() }
}

/// Three-regime corpus with an external mileage denominator.
#[derive(Debug, Clone)]
pub struct RegimeSpec {
    pub start: MonthIndex,
    pub n_months: usize,
    /// `(first month position, rate multiplier)` per regime.
    pub regimes: Vec<(usize, f64)>,
    pub base_rate: f64,
    pub lag: LagModel,
    pub seed: u64,
}

impl Default for RegimeSpec {
    fn default() -> Self {
        Self {
            start: MonthIndex::new(2014, 1).expect("valid"),
            n_months: 128,
            regimes: vec![(0, 1.0), (50, 3.0), (95, 1.8)],
            base_rate: 0.08,
            lag: LagModel { median_days: 30.0, sigma: 0.8, followup_prob: 0.2 },
            seed: 0,
        }
    }
}

pub fn regime_corpus(spec: &RegimeSpec) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let end = spec.start.add_months(spec.n_months as i64 - 1);
    let months = MonthIndex::range_inclusive(spec.start, end);
    let n = months.len() as f64;
    let exposure: Vec<(MonthIndex, f64)> =
        months.iter().enumerate().map(|(t, &m)| (m, (20.0 + 80.0 * t as f64 / n).round())).collect();
    let multiplier = |t: usize| spec.regimes.iter().rfind(|(s, _)| *s <= t).map_or(1.0, |r| r.1);
    let intensity: Vec<f64> = exposure.iter().enumerate().map(|(t, (_, e))| e * spec.base_rate * multiplier(t)).collect();
    let media_noise = Normal::new(0.0, 4.0).expect("valid");
    let media = months
        .iter()
        .enumerate()
        .map(|(t, &m)| (m, (20.0 + 15.0 * multiplier(t) + media_noise.sample(&mut rng)).clamp(0.0, 100.0).round()))
        .collect();
    let snapshot = last_day(end);
    let (incidents, true_counts) = draw_incidents(&mut rng, "av", &months, &intensity, spec.lag, snapshot, "autonomous");
    let cmp_intensity: Vec<f64> = intensity.iter().map(|l| 0.6 * l).collect();
    let cmp_lag = LagModel { median_days: 10.0, sigma: 0.5, followup_prob: 0.0 };
    let (comparison, _) = draw_incidents(&mut rng, "dmv", &months, &cmp_intensity, cmp_lag, snapshot, "autonomous");
    let at = |pos: usize| months[pos.min(months.len() - 1)];
    let ev = |name: &str, pos: usize, kind, effect, wave: Option<&str>| InterventionEvent {
        name: name.into(),
        month: at(pos),
        kind,
        expected_effect: effect,
        wave: wave.map(str::to_string),
        window_months: None,
    };
    let mut interventions = Vec::new();
    if let Some(&(s, _)) = spec.regimes.get(1) {
        interventions.push(ev("fleet expansion", s, InterventionType::Deployment, ExpectedEffect::Shock, Some("expansion")));
        interventions.push(ev("fatal crash", s + 2, InterventionType::Fatal, ExpectedEffect::Shock, Some("expansion")));
    }
    if let Some(&(s, _)) = spec.regimes.get(2) {
        interventions.push(ev("state rulemaking", s, InterventionType::Regulatory, ExpectedEffect::Mitigation, Some("rules")));
        interventions.push(ev("safety standard", s + 1, InterventionType::Standards, ExpectedEffect::Mitigation, Some("rules")));
    }
    interventions.push(ev("software update", 20, InterventionType::Company, ExpectedEffect::Mitigation, None));
    SyntheticCorpus { months, incidents, exposure, media, interventions, comparison, intensity, true_counts, ..Default::default() }
}

fn write_pairs(path: &Path, header: &str, rows: &[(MonthIndex, f64)]) -> io::Result<()> {
    let mut s = format!("{header}\n");
    for (m, v) in rows {
        s.push_str(&format!("{m},{v}\n"));
    }
    fs::write(path, s)
}

fn snake<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|j| j.as_str().map(str::to_string)).unwrap_or_default()
}

impl SyntheticCorpus {
    /// Writes every non-empty component under `dir` with the fixed file names.
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let to_io = |e: ingest::IngestError| io::Error::other(e.to_string());
        ingest::write_incidents(&self.incidents, fs::File::create(dir.join(INCIDENTS_FILE))?).map_err(to_io)?;
        if !self.comparison.is_empty() {
            ingest::write_incidents(&self.comparison, fs::File::create(dir.join(COMPARISON_FILE))?).map_err(to_io)?;
        }
        if !self.star_events.is_empty() {
            let mut s = String::from("repo,event_month,stars_added\n");
            for e in &self.star_events {
                s.push_str(&format!("{},{},{}\n", e.repo, e.event_month, e.stars_added));
            }
            fs::write(dir.join(STARS_FILE), s)?;
        }
        if !self.exposure.is_empty() {
            write_pairs(&dir.join(EXPOSURE_FILE), "month,exposure", &self.exposure)?;
        }
        if !self.media.is_empty() {
            write_pairs(&dir.join(MEDIA_FILE), "month,index", &self.media)?;
        }
        if !self.interventions.is_empty() {
            let mut s = String::from("name,month,type,expected_effect,wave\n");
            for e in &self.interventions {
                s.push_str(&format!(
                    "{},{},{},{},{}\n",
                    e.name,
                    e.month,
                    snake(&e.kind),
                    snake(&e.expected_effect),
                    e.wave.as_deref().unwrap_or("")
                ));
            }
            fs::write(dir.join(INTERVENTIONS_FILE), s)?;
        }
        Ok(())
    }

    /// Incident months of the first report, used to check truncation.
    pub fn reported_through(&self) -> Option<MonthIndex> {
        self.incidents.iter().map(|r| MonthIndex::from_date(r.first_report_date())).max()
    }
}
