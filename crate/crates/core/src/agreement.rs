//! Cross-source and cross-method agreement: correlation, lagged
//! cross-correlation, phase agreement with Cohen's kappa, and partition
//! agreement (ARI, NMI).

use std::collections::BTreeMap;
use std::fmt::Display;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats;

pub const DEFAULT_MAX_LAG: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgreementError {
    #[error("inputs have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} observations, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("input is constant")]
    ConstantInput,
    #[error("input contains a non-finite value")]
    NonFinite,
}

fn check_pair(a: &[f64], b: &[f64], need: usize) -> Result<(), AgreementError> {
    if a.len() != b.len() {
        return Err(AgreementError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < need {
        return Err(AgreementError::TooShort { need, got: a.len() });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(AgreementError::NonFinite);
    }
    Ok(())
}

/// Sample correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, AgreementError> {
    check_pair(a, b, 3)?;
    let (ma, mb) = (stats::mean(a), stats::mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(AgreementError::ConstantInput);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcfPoint {
    pub lag: i64,
    /// `None` when the overlapping window is too short or constant.
    pub r: Option<f64>,
    pub n_overlap: usize,
    pub bound: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ccf {
    pub points: Vec<CcfPoint>,
    pub best_lag: Option<i64>,
    pub best_r: Option<f64>,
}

/// `r(k) = corr(a_t, b_{t+k})` over overlapping months for `k` in `-max_lag..=max_lag`.
pub fn lagged_ccf(a: &[f64], b: &[f64], max_lag: usize) -> Result<Ccf, AgreementError> {
    check_pair(a, b, 3)?;
    let n = a.len() as i64;
    let mut points = Vec::with_capacity(2 * max_lag + 1);
    for k in -(max_lag as i64)..=(max_lag as i64) {
        let (sa, sb) = if k >= 0 { (&a[..(n - k).max(0) as usize], &b[(k.min(n)) as usize..]) } else { (&a[(-k).min(n) as usize..], &b[..(n + k).max(0) as usize]) };
        let n_overlap = sa.len();
        let r = pearson(sa, sb).ok();
        let bound = if n_overlap > 0 { 1.96 / (n_overlap as f64).sqrt() } else { f64::INFINITY };
        points.push(CcfPoint { lag: k, r, n_overlap, bound, significant: r.is_some_and(|v| v.abs() > bound) });
    }
    let best = points
        .iter()
        .filter_map(|p| p.r.map(|r| (p.lag, r)))
        .fold(None, |acc: Option<(i64, f64)>, (lag, r)| match acc {
            Some((_, br)) if br >= r => acc,
            _ => Some((lag, r)),
        });
    Ok(Ccf { points, best_lag: best.map(|b| b.0), best_r: best.map(|b| b.1) })
}

pub fn minmax_scale(series: &[f64]) -> Result<Vec<f64>, AgreementError> {
    if series.iter().any(|v| !v.is_finite()) {
        return Err(AgreementError::NonFinite);
    }
    let lo = series.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = series.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(AgreementError::ConstantInput);
    }
    Ok(series.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseAgreement {
    pub n: usize,
    pub agree: usize,
    pub raw: f64,
    pub chance: f64,
    /// `None` when chance agreement is one.
    pub kappa: Option<f64>,
    pub categories: Vec<String>,
    /// Rows index the first sequence, columns the second.
    pub confusion: Vec<Vec<usize>>,
}

/// Raw, chance and kappa agreement between two label sequences of equal length.
pub fn phase_agreement<T: Ord + Clone + Display>(p1: &[T], p2: &[T]) -> Result<PhaseAgreement, AgreementError> {
    if p1.len() != p2.len() {
        return Err(AgreementError::LengthMismatch(p1.len(), p2.len()));
    }
    if p1.is_empty() {
        return Err(AgreementError::TooShort { need: 1, got: 0 });
    }
    let mut cats: Vec<T> = p1.iter().chain(p2).cloned().collect();
    cats.sort();
    cats.dedup();
    let idx = |x: &T| cats.binary_search(x).expect("category present");
    let k = cats.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (a, b) in p1.iter().zip(p2) {
        confusion[idx(a)][idx(b)] += 1;
    }
    let n = p1.len() as u128;
    let agree: usize = (0..k).map(|i| confusion[i][i]).sum();
    let marg_product: u128 = (0..k)
        .map(|i| {
            let row: usize = confusion[i].iter().sum();
            let col: usize = confusion.iter().map(|r| r[i]).sum();
            row as u128 * col as u128
        })
        .sum();
    let n2 = n * n;
    // Integer form of (raw - chance) / (1 - chance).
    let kappa = (n2 != marg_product).then(|| (agree as f64 * n as f64 - marg_product as f64) / (n2 - marg_product) as f64);
    Ok(PhaseAgreement {
        n: p1.len(),
        agree,
        raw: agree as f64 / n as f64,
        chance: marg_product as f64 / n2 as f64,
        kappa,
        categories: cats.iter().map(|c| c.to_string()).collect(),
        confusion,
    })
}

/// Agreement over months whose first label differs from `exclude`.
pub fn phase_agreement_excluding<T: Ord + Clone + Display>(
    p1: &[T],
    p2: &[T],
    exclude: &T,
) -> Result<PhaseAgreement, AgreementError> {
    if p1.len() != p2.len() {
        return Err(AgreementError::LengthMismatch(p1.len(), p2.len()));
    }
    let (a, b): (Vec<T>, Vec<T>) = p1.iter().zip(p2).filter(|(x, _)| *x != exclude).map(|(x, y)| (x.clone(), y.clone())).unzip();
    phase_agreement(&a, &b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionAgreement {
    pub ari: f64,
    pub nmi: f64,
}

fn choose2(x: u128) -> u128 {
    x * x.saturating_sub(1) / 2
}

fn contingency(l1: &[usize], l2: &[usize]) -> (BTreeMap<(usize, usize), u128>, BTreeMap<usize, u128>, BTreeMap<usize, u128>) {
    let mut joint = BTreeMap::new();
    let mut a = BTreeMap::new();
    let mut b = BTreeMap::new();
    for (&x, &y) in l1.iter().zip(l2) {
        *joint.entry((x, y)).or_insert(0) += 1;
        *a.entry(x).or_insert(0) += 1;
        *b.entry(y).or_insert(0) += 1;
    }
    (joint, a, b)
}

/// Pair-counting ARI as an exact integer ratio; degenerate denominators give 1 for identical partitions and 0 otherwise.
pub fn adjusted_rand_index(l1: &[usize], l2: &[usize]) -> Result<f64, AgreementError> {
    if l1.len() != l2.len() {
        return Err(AgreementError::LengthMismatch(l1.len(), l2.len()));
    }
    let (joint, a, b) = contingency(l1, l2);
    let total = choose2(l1.len() as u128) as i128;
    let index = joint.values().map(|&c| choose2(c)).sum::<u128>() as i128;
    let sa = a.values().map(|&c| choose2(c)).sum::<u128>() as i128;
    let sb = b.values().map(|&c| choose2(c)).sum::<u128>() as i128;
    // ARI = (index - sa*sb/total) / ((sa+sb)/2 - sa*sb/total), scaled by 2*total.
    let num = 2 * (index * total - sa * sb);
    let den = (sa + sb) * total - 2 * sa * sb;
    if den == 0 {
        let identical = joint.len() == a.len() && joint.len() == b.len();
        return Ok(if identical { 1.0 } else { 0.0 });
    }
    Ok(num as f64 / den as f64)
}

fn entropy(counts: impl Iterator<Item = u128>, n: f64) -> f64 {
    counts
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information over the arithmetic mean of the two entropies.
pub fn normalized_mutual_information(l1: &[usize], l2: &[usize]) -> Result<f64, AgreementError> {
    if l1.len() != l2.len() {
        return Err(AgreementError::LengthMismatch(l1.len(), l2.len()));
    }
    if l1.is_empty() {
        return Err(AgreementError::TooShort { need: 1, got: 0 });
    }
    let n = l1.len() as f64;
    let (joint, a, b) = contingency(l1, l2);
    let ha = entropy(a.values().copied(), n);
    let hb = entropy(b.values().copied(), n);
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            pxy * (c as f64 * n / (a[&x] as f64 * b[&y] as f64)).ln()
        })
        .sum();
    Ok((mi.max(0.0) / (0.5 * (ha + hb))).clamp(0.0, 1.0))
}

pub fn partition_agreement(l1: &[usize], l2: &[usize]) -> Result<PartitionAgreement, AgreementError> {
    Ok(PartitionAgreement { ari: adjusted_rand_index(l1, l2)?, nmi: normalized_mutual_information(l1, l2)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub pearson_r: f64,
    pub ccf: Ccf,
    pub phase: PhaseAgreement,
    /// Same comparison without months the first source labels as `excluded_label`.
    pub phase_excluding: Option<PhaseAgreement>,
    pub excluded_label: Option<String>,
}

/// Series correlation plus phase agreement for two aligned sources.
pub fn agreement_report<T: Ord + Clone + Display>(
    a: &[f64],
    b: &[f64],
    p1: &[T],
    p2: &[T],
    max_lag: usize,
    exclude: Option<&T>,
) -> Result<AgreementReport, AgreementError> {
    let phase_excluding = match exclude {
        Some(x) => phase_agreement_excluding(p1, p2, x).ok(),
        None => None,
    };
    Ok(AgreementReport {
        pearson_r: pearson(a, b)?,
        ccf: lagged_ccf(a, b, max_lag)?,
        phase: phase_agreement(p1, p2)?,
        phase_excluding,
        excluded_label: exclude.map(|x| x.to_string()),
    })
}
