//! Incident corpus loading, filtering and monthly aggregation.
//!
//! The incident CSV carries one row per (incident, report) pair with columns
//! `incident_id, incident_date, report_date, subdomain, severity, group,
//! description`. Rows sharing an `incident_id` are merged into one record.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exposure::StarEvent;
use crate::impact::InterventionEvent;
use crate::model::{severity_sum, ModelError, MonthIndex, MonthlyPanel, SeverityLevel, SeverityScale};

pub const INCIDENT_COLUMNS: [&str; 7] =
    ["incident_id", "incident_date", "report_date", "subdomain", "severity", "group", "description"];

const MIN_YEAR: i32 = 1900;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot open {path}: {source}")]
    Open { path: PathBuf, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("header mismatch: expected columns {expected:?}, found {found:?}")]
    SchemaMismatch { expected: Vec<String>, found: Vec<String> },
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("no records remain after filtering")]
    EmptyAfterFilter,
    #[error("unknown group `{0}`")]
    UnknownGroup(String),
    #[error("line {line}: {message}")]
    InvalidValue { line: u64, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentRecord {
    pub incident_id: String,
    pub incident_date: NaiveDate,
    /// Sorted, without duplicates; never empty.
    pub report_dates: Vec<NaiveDate>,
    pub subdomain_tags: BTreeSet<String>,
    pub severity: Option<SeverityLevel>,
    pub group: Option<String>,
    pub description: Option<String>,
}

impl IncidentRecord {
    pub fn first_report_date(&self) -> NaiveDate {
        self.report_dates[0]
    }

    pub fn basis_date(&self, basis: CountBasis) -> NaiveDate {
        match basis {
            CountBasis::IncidentDate => self.incident_date,
            CountBasis::FirstReportDate => self.first_report_date(),
        }
    }
}

/// A CSV row that could not be used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedRow {
    pub line: u64,
    pub incident_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub records: Vec<IncidentRecord>,
    pub rejects: Vec<RejectedRow>,
    /// Incidents whose rows disagreed on `incident_date`.
    pub conflicting_dates: Vec<String>,
}

fn parse_date(raw: &str) -> Result<NaiveDate, String> {
    let date = NaiveDate::parse_from_str(raw.trim(), "%Y-%m-%d")
        .map_err(|e| format!("unparseable date `{raw}`: {e}"))?;
    if date.year() < MIN_YEAR {
        return Err(format!("date `{raw}` precedes {MIN_YEAR}"));
    }
    Ok(date)
}

fn non_empty(raw: &str) -> Option<String> {
    let t = raw.trim();
    (!t.is_empty()).then(|| t.to_string())
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<Vec<usize>, IngestError> {
    let names: Vec<String> = found.iter().map(|h| h.trim().to_string()).collect();
    let positions: Option<Vec<usize>> =
        expected.iter().map(|col| names.iter().position(|n| n == col)).collect();
    positions.ok_or_else(|| IngestError::SchemaMismatch {
        expected: expected.iter().map(|s| s.to_string()).collect(),
        found: names,
    })
}

fn open(path: &Path) -> Result<File, IngestError> {
    File::open(path).map_err(|source| IngestError::Open { path: path.to_path_buf(), source })
}

/// Reads an incident CSV. Row-level problems land in `Corpus::rejects`.
pub fn load_incidents<R: Read>(reader: R) -> Result<Corpus, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let cols = check_header(rdr.headers()?, &INCIDENT_COLUMNS)?;
    let mut by_id: BTreeMap<String, IncidentRecord> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut corpus = Corpus::default();

    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(cols[i]).unwrap_or("");
        let id = field(0).trim().to_string();
        let reject = |reason: String| RejectedRow { line, incident_id: id.clone(), reason };
        if id.is_empty() {
            corpus.rejects.push(reject("missing incident_id".into()));
            continue;
        }
        let incident_date = match parse_date(field(1)) {
            Ok(d) => d,
            Err(e) => {
                corpus.rejects.push(reject(e));
                continue;
            }
        };
        let report_date = match parse_date(field(2)) {
            Ok(d) => d,
            Err(e) => {
                corpus.rejects.push(reject(e));
                continue;
            }
        };
        let severity = match non_empty(field(4)).map(|s| s.parse::<SeverityLevel>()) {
            None => None,
            Some(Ok(level)) => Some(level),
            Some(Err(e)) => {
                corpus.rejects.push(reject(e.to_string()));
                continue;
            }
        };
        let tags: BTreeSet<String> =
            field(3).split(';').filter_map(non_empty).collect();

        match by_id.get_mut(&id) {
            Some(rec) => {
                if rec.incident_date != incident_date {
                    log::warn!(
                        "incident {id}: conflicting incident dates {} and {}; keeping the earlier",
                        rec.incident_date,
                        incident_date
                    );
                    if !corpus.conflicting_dates.contains(&id) {
                        corpus.conflicting_dates.push(id.clone());
                    }
                    rec.incident_date = rec.incident_date.min(incident_date);
                }
                rec.report_dates.push(report_date);
                rec.subdomain_tags.extend(tags);
                rec.severity = rec.severity.max(severity);
                if rec.group.is_none() {
                    rec.group = non_empty(field(5));
                }
                if rec.description.is_none() {
                    rec.description = non_empty(field(6));
                }
            }
            None => {
                order.push(id.clone());
                by_id.insert(
                    id.clone(),
                    IncidentRecord {
                        incident_id: id,
                        incident_date,
                        report_dates: vec![report_date],
                        subdomain_tags: tags,
                        severity,
                        group: non_empty(field(5)),
                        description: non_empty(field(6)),
                    },
                );
            }
        }
    }

    corpus.records = order
        .into_iter()
        .map(|id| {
            let mut rec = by_id.remove(&id).expect("id recorded on insert");
            rec.report_dates.sort();
            rec.report_dates.dedup();
            rec
        })
        .collect();
    Ok(corpus)
}

pub fn load_incidents_path(path: &Path) -> Result<Corpus, IngestError> {
    load_incidents(open(path)?)
}

/// Writes records back out, one row per report date.
pub fn write_incidents<W: Write>(records: &[IncidentRecord], writer: W) -> Result<(), IngestError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(INCIDENT_COLUMNS)?;
    for rec in records {
        let tags = rec.subdomain_tags.iter().cloned().collect::<Vec<_>>().join(";");
        let severity = rec.severity.map(|s| s.to_string()).unwrap_or_default();
        for report in &rec.report_dates {
            wtr.write_record([
                rec.incident_id.as_str(),
                &rec.incident_date.to_string(),
                &report.to_string(),
                &tags,
                &severity,
                rec.group.as_deref().unwrap_or(""),
                rec.description.as_deref().unwrap_or(""),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountBasis {
    IncidentDate,
    FirstReportDate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusFilter {
    pub subdomain: Option<String>,
    /// Bounds apply to the counting-basis date.
    pub date_min: Option<NaiveDate>,
    pub date_max: Option<NaiveDate>,
    pub keyword_includes: Vec<String>,
    pub keyword_excludes: Vec<String>,
    pub group: Option<String>,
}

impl CorpusFilter {
    pub fn validate(&self) -> Result<(), IngestError> {
        if let (Some(lo), Some(hi)) = (self.date_min, self.date_max) {
            if lo > hi {
                return Err(IngestError::InvalidFilter(format!("date_min {lo} is after date_max {hi}")));
            }
        }
        Ok(())
    }

    pub fn accepts(&self, rec: &IncidentRecord, basis: CountBasis) -> bool {
        if let Some(sub) = &self.subdomain {
            if !rec.subdomain_tags.iter().any(|t| t.eq_ignore_ascii_case(sub)) {
                return false;
            }
        }
        let date = rec.basis_date(basis);
        if self.date_min.is_some_and(|lo| date < lo) || self.date_max.is_some_and(|hi| date > hi) {
            return false;
        }
        if let Some(g) = &self.group {
            if rec.group.as_deref() != Some(g.as_str()) {
                return false;
            }
        }
        let text = rec.description.as_deref().unwrap_or("").to_lowercase();
        if !self.keyword_includes.is_empty()
            && !self.keyword_includes.iter().any(|k| text.contains(&k.to_lowercase()))
        {
            return false;
        }
        !self.keyword_excludes.iter().any(|k| text.contains(&k.to_lowercase()))
    }
}

pub fn filter_records<'a>(
    records: &'a [IncidentRecord],
    filter: &CorpusFilter,
    basis: CountBasis,
) -> Result<Vec<&'a IncidentRecord>, IngestError> {
    filter.validate()?;
    Ok(records.iter().filter(|r| filter.accepts(r, basis)).collect())
}

fn panel_over(
    records: &[&IncidentRecord],
    basis: CountBasis,
    start: MonthIndex,
    end: MonthIndex,
    scale: &SeverityScale,
) -> Result<MonthlyPanel, IngestError> {
    let months = MonthIndex::range_inclusive(start, end);
    let mut counts = vec![0u64; months.len()];
    let mut levels: Vec<Vec<SeverityLevel>> = vec![Vec::new(); months.len()];
    let mut any_severity = false;
    for rec in records {
        let offset = start.months_until(MonthIndex::from_date(rec.basis_date(basis)));
        if offset < 0 || offset as usize >= months.len() {
            continue;
        }
        counts[offset as usize] += 1;
        if let Some(level) = rec.severity {
            any_severity = true;
            levels[offset as usize].push(level);
        }
    }
    let mut panel = MonthlyPanel::from_counts(months, counts)?;
    if any_severity {
        let sums = levels.iter().map(|l| severity_sum(l, scale)).collect::<Result<Vec<_>, _>>()?;
        panel.severity_sum = Some(sums);
    }
    Ok(panel)
}

fn observed_range(records: &[&IncidentRecord], basis: CountBasis) -> Option<(MonthIndex, MonthIndex)> {
    let months = records.iter().map(|r| MonthIndex::from_date(r.basis_date(basis)));
    let lo = months.clone().min()?;
    let hi = months.max()?;
    Some((lo, hi))
}

/// Zero-filled monthly counts spanning the observed month range.
pub fn aggregate_monthly(
    records: &[IncidentRecord],
    filter: &CorpusFilter,
    basis: CountBasis,
    scale: &SeverityScale,
) -> Result<MonthlyPanel, IngestError> {
    let kept = filter_records(records, filter, basis)?;
    let (start, end) = observed_range(&kept, basis).ok_or(IngestError::EmptyAfterFilter)?;
    panel_over(&kept, basis, start, end, scale)
}

/// Like [`aggregate_monthly`] but over a fixed month range; records outside it are dropped.
pub fn aggregate_monthly_in(
    records: &[IncidentRecord],
    filter: &CorpusFilter,
    basis: CountBasis,
    scale: &SeverityScale,
    start: MonthIndex,
    end: MonthIndex,
) -> Result<MonthlyPanel, IngestError> {
    if start > end {
        return Err(IngestError::InvalidFilter(format!("month range {start}..{end} is empty")));
    }
    let kept = filter_records(records, filter, basis)?;
    if kept.is_empty() {
        return Err(IngestError::EmptyAfterFilter);
    }
    panel_over(&kept, basis, start, end, scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDecomposition {
    pub total: MonthlyPanel,
    pub groups: BTreeMap<String, MonthlyPanel>,
    /// Records in no requested group, including those without a group.
    pub other: MonthlyPanel,
}

/// Per-group panels on the common month range of the filtered corpus.
pub fn group_decompose(
    records: &[IncidentRecord],
    filter: &CorpusFilter,
    basis: CountBasis,
    groups: &[String],
    scale: &SeverityScale,
) -> Result<GroupDecomposition, IngestError> {
    let kept = filter_records(records, filter, basis)?;
    let (start, end) = observed_range(&kept, basis).ok_or(IngestError::EmptyAfterFilter)?;
    for g in groups {
        if !records.iter().any(|r| r.group.as_deref() == Some(g.as_str())) {
            return Err(IngestError::UnknownGroup(g.clone()));
        }
    }
    let total = panel_over(&kept, basis, start, end, scale)?;
    let mut out = BTreeMap::new();
    for g in groups {
        let members: Vec<_> = kept.iter().copied().filter(|r| r.group.as_deref() == Some(g.as_str())).collect();
        out.insert(g.clone(), panel_over(&members, basis, start, end, scale)?);
    }
    let rest: Vec<_> = kept
        .iter()
        .copied()
        .filter(|r| !r.group.as_ref().is_some_and(|g| groups.contains(g)))
        .collect();
    let other = panel_over(&rest, basis, start, end, scale)?;
    Ok(GroupDecomposition { total, groups: out, other })
}

#[derive(Debug, Deserialize)]
struct ExposureRow {
    month: MonthIndex,
    exposure: f64,
}

#[derive(Debug, Deserialize)]
struct MediaRow {
    month: MonthIndex,
    index: f64,
}

/// `month, exposure` rows. Zero is allowed; such months are excluded from offset fits.
pub fn load_exposure<R: Read>(reader: R) -> Result<Vec<(MonthIndex, f64)>, IngestError> {
    let mut rdr = csv::Reader::from_reader(reader);
    check_header(rdr.headers()?, &["month", "exposure"])?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<ExposureRow>() {
        let row = row?;
        if !row.exposure.is_finite() || row.exposure < 0.0 {
            return Err(IngestError::InvalidValue {
                line: out.len() as u64 + 2,
                message: format!("exposure for {} must be non-negative, got {}", row.month, row.exposure),
            });
        }
        out.push((row.month, row.exposure));
    }
    out.sort_by_key(|(m, _)| *m);
    Ok(out)
}

/// `month, index` rows with the index in [0, 100].
pub fn load_media<R: Read>(reader: R) -> Result<Vec<(MonthIndex, f64)>, IngestError> {
    let mut rdr = csv::Reader::from_reader(reader);
    check_header(rdr.headers()?, &["month", "index"])?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<MediaRow>() {
        let row = row?;
        if !(0.0..=100.0).contains(&row.index) {
            return Err(IngestError::InvalidValue {
                line: out.len() as u64 + 2,
                message: format!("media index for {} outside [0, 100]: {}", row.month, row.index),
            });
        }
        out.push((row.month, row.index));
    }
    out.sort_by_key(|(m, _)| *m);
    Ok(out)
}

/// `repo, event_month, stars_added` rows.
pub fn load_star_events<R: Read>(reader: R) -> Result<Vec<StarEvent>, IngestError> {
    let mut rdr = csv::Reader::from_reader(reader);
    check_header(rdr.headers()?, &["repo", "event_month", "stars_added"])?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<StarEvent>() {
        let ev = row?;
        if !ev.stars_added.is_finite() || ev.stars_added < 0.0 {
            return Err(IngestError::InvalidValue {
                line: out.len() as u64 + 2,
                message: format!("stars_added for {} must be non-negative", ev.repo),
            });
        }
        out.push(ev);
    }
    Ok(out)
}

/// `name, month, type, expected_effect[, wave]` rows.
pub fn load_interventions<R: Read>(reader: R) -> Result<Vec<InterventionEvent>, IngestError> {
    let mut rdr = csv::Reader::from_reader(reader);
    check_header(rdr.headers()?, &["name", "month", "type", "expected_effect"])?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<InterventionEvent>() {
        out.push(row?);
    }
    Ok(out)
}

pub fn load_exposure_path(path: &Path) -> Result<Vec<(MonthIndex, f64)>, IngestError> {
    load_exposure(open(path)?)
}

pub fn load_media_path(path: &Path) -> Result<Vec<(MonthIndex, f64)>, IngestError> {
    load_media(open(path)?)
}

pub fn load_star_events_path(path: &Path) -> Result<Vec<StarEvent>, IngestError> {
    load_star_events(open(path)?)
}

pub fn load_interventions_path(path: &Path) -> Result<Vec<InterventionEvent>, IngestError> {
    load_interventions(open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "incident_id,incident_date,report_date,subdomain,severity,group,description\n";

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn m(s: &str) -> MonthIndex {
        s.parse().unwrap()
    }

    fn record(id: &str, date: &str, group: Option<&str>) -> IncidentRecord {
        IncidentRecord {
            incident_id: id.into(),
            incident_date: d(date),
            report_dates: vec![d(date)],
            subdomain_tags: BTreeSet::from(["deepfake".to_string()]),
            severity: None,
            group: group.map(String::from),
            description: None,
        }
    }

    #[test]
    fn duplicate_rows_merge_report_dates() {
        let csv = format!(
            "{HEADER}a,2020-01-10,2020-01-12,deepfake,Minor,,x\na,2020-01-10,2020-02-01,deepfake,Minor,,x\n"
        );
        let corpus = load_incidents(csv.as_bytes()).unwrap();
        assert_eq!(corpus.records.len(), 1);
        assert_eq!(corpus.records[0].report_dates, vec![d("2020-01-12"), d("2020-02-01")]);
        assert_eq!(corpus.records[0].first_report_date(), d("2020-01-12"));
    }

    #[test]
    fn conflicting_incident_dates_keep_earliest() {
        let csv = format!("{HEADER}a,2020-03-10,2020-04-01,av,,,\na,2020-02-10,2020-04-02,av,,,\n");
        let corpus = load_incidents(csv.as_bytes()).unwrap();
        assert_eq!(corpus.records[0].incident_date, d("2020-02-10"));
        assert_eq!(corpus.conflicting_dates, vec!["a".to_string()]);
    }

    #[test]
    fn bad_dates_are_rejected_not_fatal() {
        let csv = format!(
            "{HEADER}a,2020-01-10,1899-12-31,deepfake,,,\nb,2020-01-10,2020-01-11,deepfake,,,\nc,notadate,2020-01-11,deepfake,,,\n"
        );
        let corpus = load_incidents(csv.as_bytes()).unwrap();
        assert_eq!(corpus.records.len(), 1);
        assert_eq!(corpus.rejects.len(), 2);
        assert_eq!(corpus.rejects[0].incident_id, "a");
        assert_eq!(corpus.rejects[0].line, 2);
    }

    #[test]
    fn wrong_header_is_schema_mismatch() {
        let csv = "id,date\n1,2020-01-01\n";
        assert!(matches!(load_incidents(csv.as_bytes()), Err(IngestError::SchemaMismatch { .. })));
    }

    #[test]
    fn writer_round_trips() {
        let mut recs: Vec<IncidentRecord> = (0..5)
            .map(|i| record(&format!("id-{i}"), &format!("2021-0{}-15", i + 1), Some("g")))
            .collect();
        recs[2].report_dates.push(d("2022-01-01"));
        recs[3].severity = Some(SeverityLevel::Severe);
        recs[4].description = Some("voice clone, scam".into());
        let mut buf = Vec::new();
        write_incidents(&recs, &mut buf).unwrap();
        let back = load_incidents(buf.as_slice()).unwrap();
        assert_eq!(back.records, recs);
        assert!(back.rejects.is_empty());
    }

    #[test]
    fn zero_fill_between_observed_months() {
        let recs = vec![record("a", "2020-01-05", None), record("b", "2020-03-05", None)];
        let panel = aggregate_monthly(&recs, &CorpusFilter::default(), CountBasis::IncidentDate, &SeverityScale::default())
            .unwrap();
        assert_eq!(panel.months, MonthIndex::range_inclusive(m("2020-01"), m("2020-03")));
        assert_eq!(panel.raw_count, vec![1, 0, 1]);
        assert!(panel.severity_sum.is_none());
    }

    #[test]
    fn fixed_ranges_cover_case_study_windows() {
        let recs = vec![record("a", "2014-07-01", None), record("b", "2025-02-20", None)];
        let scale = SeverityScale::default();
        let av = aggregate_monthly(&recs, &CorpusFilter::default(), CountBasis::IncidentDate, &scale).unwrap();
        assert_eq!(av.len(), 128);
        let df = aggregate_monthly_in(&recs, &CorpusFilter::default(), CountBasis::IncidentDate, &scale, m("2017-03"), m("2025-09"))
            .unwrap();
        assert_eq!(df.len(), 103);
    }

    #[test]
    fn filter_rules() {
        let mut rec = record("a", "2020-05-01", Some("Waymo"));
        rec.description = Some("Political DEEPFAKE video".into());
        let basis = CountBasis::IncidentDate;
        let mut f = CorpusFilter { subdomain: Some("Deepfake".into()), ..Default::default() };
        assert!(f.accepts(&rec, basis));
        f.keyword_includes = vec!["deepfake".into()];
        assert!(f.accepts(&rec, basis));
        f.keyword_excludes = vec!["political".into()];
        assert!(!f.accepts(&rec, basis));
        let f = CorpusFilter { date_min: Some(d("2020-06-01")), ..Default::default() };
        assert!(!f.accepts(&rec, basis));
        let f = CorpusFilter { group: Some("Cruise".into()), ..Default::default() };
        assert!(!f.accepts(&rec, basis));
        let bad = CorpusFilter { date_min: Some(d("2021-01-01")), date_max: Some(d("2020-01-01")), ..Default::default() };
        assert!(matches!(filter_records(&[rec], &bad, basis), Err(IngestError::InvalidFilter(_))));
    }

    #[test]
    fn empty_after_filter() {
        let recs = vec![record("a", "2020-01-05", None)];
        let f = CorpusFilter { subdomain: Some("av".into()), ..Default::default() };
        assert!(matches!(
            aggregate_monthly(&recs, &f, CountBasis::IncidentDate, &SeverityScale::default()),
            Err(IngestError::EmptyAfterFilter)
        ));
    }

    #[test]
    fn first_report_basis_counts_first_reports() {
        let mut rec = record("a", "2020-01-05", None);
        rec.report_dates = vec![d("2020-03-01"), d("2020-04-01")];
        let panel =
            aggregate_monthly(&[rec], &CorpusFilter::default(), CountBasis::FirstReportDate, &SeverityScale::default())
                .unwrap();
        assert_eq!(panel.months, vec![m("2020-03")]);
        assert_eq!(panel.raw_count, vec![1]);
    }

    #[test]
    fn severity_sums_per_month() {
        let mut a = record("a", "2020-01-05", None);
        a.severity = Some(SeverityLevel::Minor);
        let mut b = record("b", "2020-01-25", None);
        b.severity = Some(SeverityLevel::Severe);
        let c = record("c", "2020-02-01", None);
        let panel =
            aggregate_monthly(&[a, b, c], &CorpusFilter::default(), CountBasis::IncidentDate, &SeverityScale::default())
                .unwrap();
        assert_eq!(panel.severity_sum, Some(vec![53.0, 0.0]));
    }

    #[test]
    fn group_panels_are_additive() {
        let recs = vec![
            record("1", "2020-01-01", Some("A")),
            record("2", "2020-01-02", Some("A")),
            record("3", "2020-01-03", Some("B")),
            record("4", "2020-01-04", Some("B")),
            record("5", "2020-01-05", Some("B")),
            record("6", "2020-03-05", Some("A")),
        ];
        let dec = group_decompose(
            &recs,
            &CorpusFilter::default(),
            CountBasis::IncidentDate,
            &["A".into(), "B".into()],
            &SeverityScale::default(),
        )
        .unwrap();
        assert_eq!(dec.total.raw_count, vec![5, 0, 1]);
        assert_eq!(dec.groups["A"].raw_count, vec![2, 0, 1]);
        assert_eq!(dec.groups["B"].raw_count, vec![3, 0, 0]);
        assert_eq!(dec.other.raw_count, vec![0, 0, 0]);
        assert!(matches!(
            group_decompose(&recs, &CorpusFilter::default(), CountBasis::IncidentDate, &["Z".into()], &SeverityScale::default()),
            Err(IngestError::UnknownGroup(_))
        ));
    }

    #[test]
    fn auxiliary_loaders() {
        let exp = load_exposure("month,exposure\n2021-02,3.5\n2021-01,0\n".as_bytes()).unwrap();
        assert_eq!(exp, vec![(m("2021-01"), 0.0), (m("2021-02"), 3.5)]);
        assert!(load_exposure("month,exposure\n2021-02,-1\n".as_bytes()).is_err());
        let media = load_media("month,index\n2021-01,55\n".as_bytes()).unwrap();
        assert_eq!(media, vec![(m("2021-01"), 55.0)]);
        assert!(load_media("month,index\n2021-01,155\n".as_bytes()).is_err());
        let stars = load_star_events("repo,event_month,stars_added\nfaceswap,2019-05,120\n".as_bytes()).unwrap();
        assert_eq!(stars[0].event_month, m("2019-05"));
        let iv = load_interventions(
            "name,month,type,expected_effect,wave\nPolicy,2020-01,platform,mitigation,1\nLaunch,2021-04,deployment,shock,\n"
                .as_bytes(),
        )
        .unwrap();
        assert_eq!(iv.len(), 2);
        assert_eq!(iv[0].wave.as_deref(), Some("1"));
        assert_eq!(iv[1].wave, None);
    }

    fn arb_records() -> impl Strategy<Value = Vec<IncidentRecord>> {
        prop::collection::vec((0i64..36, 0u32..28, 0usize..3), 1..60).prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, (mo, day, g))| {
                    let month = m("2019-01").add_months(mo);
                    let date = month.first_day() + chrono::Days::new(u64::from(day));
                    let group = ["A", "B", "C"][g];
                    record(&format!("r{i}"), &date.to_string(), Some(group))
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn counts_sum_to_records(recs in arb_records()) {
            let panel = aggregate_monthly(&recs, &CorpusFilter::default(), CountBasis::IncidentDate, &SeverityScale::default()).unwrap();
            prop_assert_eq!(panel.raw_count.iter().sum::<u64>() as usize, recs.len());
            prop_assert_eq!(panel.raw_count.first().copied().map(|c| c > 0), Some(true));
            prop_assert_eq!(panel.raw_count.last().copied().map(|c| c > 0), Some(true));
        }

        #[test]
        fn aggregation_ignores_row_order(recs in arb_records(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = recs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let scale = SeverityScale::default();
            let a = aggregate_monthly(&recs, &CorpusFilter::default(), CountBasis::IncidentDate, &scale).unwrap();
            let b = aggregate_monthly(&shuffled, &CorpusFilter::default(), CountBasis::IncidentDate, &scale).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn three_groups_sum_to_total(recs in arb_records()) {
            let dec = group_decompose(
                &recs,
                &CorpusFilter::default(),
                CountBasis::IncidentDate,
                &["A".into(), "B".into()],
                &SeverityScale::default(),
            );
            // A group may be absent from a small random corpus.
            if let Ok(dec) = dec {
                for t in 0..dec.total.len() {
                    let parts = dec.groups.values().map(|p| p.raw_count[t]).sum::<u64>() + dec.other.raw_count[t];
                    prop_assert_eq!(parts, dec.total.raw_count[t]);
                }
            }
        }
    }
}
