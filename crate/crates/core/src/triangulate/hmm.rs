use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TriangulateError;
use crate::stats;

pub const VARIANCE_FLOOR: f64 = 1e-4;
/// Emission densities above this mark the point-mass pathology.
pub const DEGENERATE_DENSITY: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HmmConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub variance_floor: f64,
    pub restarts: usize,
}

impl Default for HmmConfig {
    fn default() -> Self {
        Self { max_iter: 500, tol: 1e-8, variance_floor: VARIANCE_FLOOR, restarts: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmFit {
    pub n_states: usize,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    pub loglik: f64,
    pub posterior: Vec<Vec<f64>>,
    pub states: Vec<usize>,
    pub occupancy: Vec<usize>,
    pub max_density: f64,
    pub degenerate: bool,
    pub iterations: usize,
    pub converged: bool,
    pub loglik_trace: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
struct Params {
    means: Vec<f64>,
    variances: Vec<f64>,
    trans: Vec<Vec<f64>>,
    init: Vec<f64>,
}

pub(crate) struct Posterior {
    pub loglik: f64,
    pub gamma: Vec<Vec<f64>>,
    /// Summed pairwise marginals over t.
    pub xi_sum: Vec<Vec<f64>>,
    #[cfg(test)]
    pub xi: Vec<Vec<Vec<f64>>>,
}

fn log_density(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean) * (x - mean) / var)
}

/// Scaled forward-backward in log-shifted emission space.
fn forward_backward(x: &[f64], p: &Params) -> Posterior {
    let n = x.len();
    let k = p.means.len();
    let mut b = vec![vec![0.0; k]; n];
    let mut shift = vec![0.0; n];
    for t in 0..n {
        let logs: Vec<f64> = (0..k).map(|j| log_density(x[t], p.means[j], p.variances[j])).collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        shift[t] = m;
        for j in 0..k {
            b[t][j] = (logs[j] - m).exp();
        }
    }
    let mut alpha = vec![vec![0.0; k]; n];
    let mut c = vec![0.0; n];
    for t in 0..n {
        for j in 0..k {
            let prior = if t == 0 { p.init[j] } else { (0..k).map(|i| alpha[t - 1][i] * p.trans[i][j]).sum() };
            alpha[t][j] = prior * b[t][j];
        }
        c[t] = alpha[t].iter().sum::<f64>().max(f64::MIN_POSITIVE);
        for j in 0..k {
            alpha[t][j] /= c[t];
        }
    }
    let loglik: f64 = (0..n).map(|t| c[t].ln() + shift[t]).sum();

    let mut beta = vec![vec![1.0; k]; n];
    for t in (0..n - 1).rev() {
        for i in 0..k {
            beta[t][i] = (0..k).map(|j| p.trans[i][j] * b[t + 1][j] * beta[t + 1][j]).sum::<f64>() / c[t + 1];
        }
    }
    let mut gamma = vec![vec![0.0; k]; n];
    for t in 0..n {
        let row: Vec<f64> = (0..k).map(|j| alpha[t][j] * beta[t][j]).collect();
        let s: f64 = row.iter().sum();
        for j in 0..k {
            gamma[t][j] = row[j] / s;
        }
    }
    let mut xi_sum = vec![vec![0.0; k]; k];
    #[cfg(test)]
    let mut xi_all = Vec::with_capacity(n.saturating_sub(1));
    for t in 0..n - 1 {
        let mut xi = vec![vec![0.0; k]; k];
        let mut s = 0.0;
        for i in 0..k {
            for j in 0..k {
                xi[i][j] = alpha[t][i] * p.trans[i][j] * b[t + 1][j] * beta[t + 1][j];
                s += xi[i][j];
            }
        }
        for i in 0..k {
            for j in 0..k {
                xi[i][j] /= s;
                xi_sum[i][j] += xi[i][j];
            }
        }
        #[cfg(test)]
        xi_all.push(xi);
    }
    Posterior {
        loglik,
        gamma,
        xi_sum,
        #[cfg(test)]
        xi: xi_all,
    }
}

fn m_step(x: &[f64], post: &Posterior, prev: &Params, floor: f64) -> Params {
    let n = x.len();
    let k = prev.means.len();
    let init = post.gamma[0].clone();
    let mut trans = prev.trans.clone();
    for i in 0..k {
        let denom: f64 = (0..n - 1).map(|t| post.gamma[t][i]).sum();
        if denom > 1e-300 {
            for j in 0..k {
                trans[i][j] = post.xi_sum[i][j] / denom;
            }
            let s: f64 = trans[i].iter().sum();
            trans[i].iter_mut().for_each(|v| *v /= s);
        }
    }
    let mut means = prev.means.clone();
    let mut variances = prev.variances.clone();
    for j in 0..k {
        let w: f64 = (0..n).map(|t| post.gamma[t][j]).sum();
        if w > 1e-300 {
            let m = (0..n).map(|t| post.gamma[t][j] * x[t]).sum::<f64>() / w;
            let v = (0..n).map(|t| post.gamma[t][j] * (x[t] - m) * (x[t] - m)).sum::<f64>() / w;
            means[j] = m;
            variances[j] = v.max(floor);
        }
    }
    Params { means, variances, trans, init }
}

fn initial_params(x: &[f64], k: usize, restart: usize, rng: &mut ChaCha8Rng, floor: f64) -> Params {
    let var = stats::population_variance(x).max(floor);
    let means: Vec<f64> = if restart == 0 {
        (0..k).map(|j| stats::quantile(x, (j as f64 + 0.5) / k as f64)).collect()
    } else {
        let sd = var.sqrt();
        let mut m: Vec<f64> = (0..k).map(|_| x[rng.random_range(0..x.len())] + 0.1 * sd * rng.random_range(-1.0..1.0)).collect();
        m.sort_by(f64::total_cmp);
        m
    };
    let trans = (0..k)
        .map(|i| (0..k).map(|j| if k == 1 { 1.0 } else if i == j { 0.9 } else { 0.1 / (k - 1) as f64 }).collect())
        .collect();
    Params { means, variances: vec![var; k], trans, init: vec![1.0 / k as f64; k] }
}

fn validate(x: &[f64], k: usize) -> Result<(), TriangulateError> {
    if k == 0 {
        return Err(TriangulateError::ZeroStates);
    }
    if x.len() <= 2 * k {
        return Err(TriangulateError::TooManyStates { states: k, n: x.len() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(TriangulateError::NonFinite);
    }
    Ok(())
}

fn run_em(x: &[f64], k: usize, seed: u64, restart: usize, cfg: &HmmConfig) -> HmmFit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(restart as u64));
    let mut params = initial_params(x, k, restart, &mut rng, cfg.variance_floor);
    let mut post = forward_backward(x, &params);
    let mut trace = vec![post.loglik];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let next = m_step(x, &post, &params, cfg.variance_floor);
        let next_post = forward_backward(x, &next);
        let gain = next_post.loglik - post.loglik;
        params = next;
        post = next_post;
        trace.push(post.loglik);
        if gain < cfg.tol {
            converged = true;
            break;
        }
    }
    finish(x, params, post, trace, iterations, converged, seed)
}

fn finish(x: &[f64], p: Params, post: Posterior, trace: Vec<f64>, iterations: usize, converged: bool, seed: u64) -> HmmFit {
    let k = p.means.len();
    let states: Vec<usize> = post
        .gamma
        .iter()
        .map(|g| (0..k).fold(0, |best, j| if g[j] > g[best] { j } else { best }))
        .collect();
    let mut occupancy = vec![0; k];
    states.iter().for_each(|&s| occupancy[s] += 1);
    let max_density = x
        .iter()
        .zip(&states)
        .map(|(&v, &s)| log_density(v, p.means[s], p.variances[s]).exp())
        .fold(0.0, f64::max);
    HmmFit {
        n_states: k,
        means: p.means,
        variances: p.variances,
        transition: p.trans,
        initial: p.init,
        loglik: post.loglik,
        posterior: post.gamma,
        states,
        occupancy,
        max_density,
        degenerate: max_density > DEGENERATE_DENSITY,
        iterations,
        converged,
        loglik_trace: trace,
        seed,
    }
}

/// EM fit keeping the best of `cfg.restarts` starts.
pub fn hmm_fit_with(signal: &[f64], k: usize, seed: u64, cfg: &HmmConfig) -> Result<HmmFit, TriangulateError> {
    validate(signal, k)?;
    let fits: Vec<HmmFit> = (0..cfg.restarts.max(1)).into_par_iter().map(|r| run_em(signal, k, seed, r, cfg)).collect();
    Ok(fits.into_iter().reduce(|a, b| if b.loglik > a.loglik { b } else { a }).expect("at least one restart"))
}

pub fn hmm_fit(signal: &[f64], k: usize, seed: u64) -> Result<HmmFit, TriangulateError> {
    hmm_fit_with(signal, k, seed, &HmmConfig::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicRow {
    pub k: usize,
    pub loglik: f64,
    pub n_params: usize,
    pub bic: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmSelection {
    pub k_star: usize,
    pub table: Vec<BicRow>,
}

/// Free parameters: K(K-1) transitions, K-1 initial, 2K emission.
pub fn hmm_param_count(k: usize) -> usize {
    k * k + 2 * k - 1
}

pub fn hmm_select(signal: &[f64], k_range: &[usize], seed: u64, cfg: &HmmConfig) -> Result<HmmSelection, TriangulateError> {
    if k_range.is_empty() {
        return Err(TriangulateError::EmptyRange);
    }
    let ln_n = (signal.len() as f64).ln();
    let table = k_range
        .iter()
        .map(|&k| {
            let fit = hmm_fit_with(signal, k, seed, cfg)?;
            let p = hmm_param_count(k);
            Ok(BicRow { k, loglik: fit.loglik, n_params: p, bic: -2.0 * fit.loglik + p as f64 * ln_n, degenerate: fit.degenerate })
        })
        .collect::<Result<Vec<_>, TriangulateError>>()?;
    let k_star = table.iter().min_by(|a, b| a.bic.total_cmp(&b.bic)).map(|r| r.k).expect("non-empty");
    Ok(HmmSelection { k_star, table })
}

/// Best label agreement over all relabelings of `predicted`.
pub fn permutation_accuracy(truth: &[usize], predicted: &[usize], k: usize) -> f64 {
    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }
    let n = truth.len().min(predicted.len());
    if n == 0 {
        return 0.0;
    }
    permutations(k)
        .iter()
        .map(|perm| (0..n).filter(|&t| predicted[t] < k && perm[predicted[t]] == truth[t]).count())
        .max()
        .unwrap_or(0) as f64
        / n as f64
}
