//! Ingest through phase classification on a hand-built corpus with one step.

use phasewatch_core::delay::{apply_nowcast, build_nowcast, first_report_lags};
use phasewatch_core::exposure::merge_external;
use phasewatch_core::glm::{excess_risk, fit_count_model, CountFamily, Formula};
use phasewatch_core::ingest::{aggregate_monthly_in, load_incidents, CorpusFilter, CountBasis};
use phasewatch_core::pelt::{default_grid, pelt_detect, penalty_sweep, select_by_plateau};
use phasewatch_core::phases::{calibrate_thresholds, timeline, Phase3, PhaseThresholds};
use phasewatch_core::{MonthIndex, SeverityScale};

const MONTHS: usize = 48;
const BREAK: usize = 24;
const EXPOSURE: f64 = 50.0;

fn month(i: usize) -> MonthIndex {
    MonthIndex::new(2019, 1).unwrap().add_months(i as i64)
}

fn count(i: usize) -> usize {
    let low = [1, 2, 3, 2];
    let high = [10, 12, 14, 12];
    if i < BREAK { low[i % 4] } else { high[i % 4] }
}

/// Every fourth incident is first reported the following month; reports past the last month are unseen.
fn corpus_csv() -> String {
    let mut s = String::from("incident_id,incident_date,report_date,subdomain,severity,group,description\n");
    let mut k = 0usize;
    for i in 0..MONTHS {
        let m = month(i);
        for _ in 0..count(i) {
            let late = k % 4 == 0;
            let report = if late { m.add_months(1) } else { m };
            if report <= month(MONTHS - 1) {
                s.push_str(&format!(
                    "inc-{k:04},{}-{:02}-05,{}-{:02}-20,synthetic,,,\n",
                    m.year(),
                    m.month(),
                    report.year(),
                    report.month()
                ));
            }
            k += 1;
        }
    }
    s
}

#[test]
fn step_corpus_flows_to_phases() {
    let corpus = load_incidents(corpus_csv().as_bytes()).unwrap();
    assert!(corpus.rejects.is_empty());
    let panel = aggregate_monthly_in(
        &corpus.records,
        &CorpusFilter::default(),
        CountBasis::IncidentDate,
        &SeverityScale::default(),
        month(0),
        month(MONTHS - 1),
    )
    .unwrap();
    assert_eq!(panel.len(), MONTHS);
    for i in 0..MONTHS - 1 {
        assert_eq!(panel.raw_count[i] as usize, count(i), "month {i}");
    }

    let lags = first_report_lags(&corpus.records);
    let on_time = lags.months.iter().filter(|&&h| h == 0).count() as f64 / lags.months.len() as f64;
    let adj = build_nowcast(&lags.months, 0.95, 5.0).unwrap();
    assert_eq!(adj.window_months, 1);
    assert!((adj.cdf[0] - on_time).abs() < 1e-12);
    let nowcast = apply_nowcast(&panel, &adj, month(MONTHS - 1)).unwrap();
    let last = MONTHS - 1;
    assert!((nowcast.nowcast_count[last] - panel.raw_count[last] as f64 / on_time).abs() < 1e-9);
    assert_eq!(nowcast.nowcast_count[last - 2], panel.raw_count[last - 2] as f64);

    let exposure: Vec<_> = (0..MONTHS).map(|i| (month(i), EXPOSURE)).collect();
    let (panel, coverage) = merge_external(&nowcast, &exposure).unwrap();
    assert!(coverage.uncovered_months.is_empty());

    // Intercept-only Poisson with a constant offset fits the sample mean everywhere.
    let formula = Formula { offset: true, ..Formula::default() };
    let fit = fit_count_model(&panel, formula, CountFamily::Poisson).unwrap();
    assert!(fit.converged);
    let ybar = fit.y.iter().sum::<f64>() / fit.y.len() as f64;
    for mu in &fit.fitted {
        assert!((mu - ybar).abs() <= 1e-9 * ybar);
    }

    let eps = 0.5;
    let ex = excess_risk(&fit, eps).unwrap();
    for (t, e) in ex.excess.iter().enumerate() {
        let oracle = ((fit.y_unrounded[t] + eps) / EXPOSURE).ln() - ((fit.fitted[t] + eps) / EXPOSURE).ln();
        assert!((e - oracle).abs() < 1e-9, "excess at {t}");
    }
    let risk = ex.standardized.unwrap();

    let sweep = penalty_sweep(&risk.z, &default_grid(), 2).unwrap();
    let choice = select_by_plateau(&sweep).unwrap();
    let seg = pelt_detect(&risk.z, choice.rho_star, 2).unwrap();
    assert_eq!(seg.main_break(), Some(BREAK));

    let reference = &risk.z[..BREAK];
    let (lo, hi) = calibrate_thresholds(reference).unwrap();
    let mu = reference.iter().sum::<f64>() / BREAK as f64;
    let sd = (reference.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / BREAK as f64).sqrt();
    assert!((lo - (mu + sd)).abs() < 1e-12 && (hi - (mu + 2.0 * sd)).abs() < 1e-12);

    let th = PhaseThresholds::new(lo, hi).unwrap();
    let tl = timeline(&panel, &risk, &th).unwrap();
    assert!(tl.three_phase[BREAK..].iter().all(|p| *p != Phase3::DormantBaseline));
    let dormant = tl.three_phase[..BREAK].iter().filter(|p| **p == Phase3::DormantBaseline).count();
    assert!(dormant * 2 >= BREAK, "{dormant} dormant months before the step");
}
