//! Evaluation quantities: permutation-invariant model distance, quantity skew,
//! and clustering-error diagnostics.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::GroundTruth;
use crate::Result;

const MAX_BRUTE_FORCE_K: usize = 10;

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Bottleneck matching distance between two multisets of k models:
/// min over permutations pi of max_j ||est[pi(j)] - truth[j]||, with the
/// lexicographically smallest minimizing pi as witness.
pub fn permutation_distance(
    est: &[Vec<f64>],
    truth: &[Vec<f64>],
) -> Result<(f64, Vec<usize>)> {
    let k = truth.len();
    if est.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: est.len(),
        });
    }
    if k == 0 || k > MAX_BRUTE_FORCE_K {
        return Err(Error::UnsupportedK(k));
    }
    let mut pairwise = vec![vec![0.0; k]; k];
    for (e, row) in pairwise.iter_mut().enumerate() {
        for (t, cell) in row.iter_mut().enumerate() {
            if est[e].len() != truth[t].len() {
                return Err(Error::DimensionMismatch {
                    expected: truth[t].len(),
                    got: est[e].len(),
                });
            }
            *cell = euclidean(&est[e], &truth[t]);
        }
    }
    let mut best = f64::INFINITY;
    let mut witness = Vec::new();
    // (0..k).permutations yields candidates in lexicographic order, so keeping
    // only strict improvements leaves the lexicographically smallest witness.
    for perm in (0..k).permutations(k) {
        let cost = perm
            .iter()
            .enumerate()
            .map(|(j, &pj)| pairwise[pj][j])
            .fold(0.0f64, f64::max);
        if cost < best {
            best = cost;
            witness = perm;
        }
    }
    Ok((best, witness))
}

/// Chi-squared divergence between the client data-mass distribution n_i/N and
/// the uniform distribution over the M clients: sum_i (n_i/N - 1/M)^2 * M.
pub fn chi_squared_skew(sizes: &[usize]) -> Result<f64> {
    if sizes.is_empty() {
        return Err(Error::InvalidConfig("chi_squared_skew of no clients".into()));
    }
    if let Some(i) = sizes.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClient { index: i });
    }
    let m = sizes.len() as f64;
    let total: usize = sizes.iter().sum();
    let n = total as f64;
    Ok(sizes
        .iter()
        .map(|&ni| {
            let dev = ni as f64 / n - 1.0 / m;
            dev * dev * m
        })
        .sum())
}

/// Data mass held by clients whose aligned estimated label disagrees with
/// truth: sum over {i : perm[est_i] != z_i} of n_i / N. `perm` maps estimated
/// label space into the true label space.
pub fn misclustering_mass(
    est_labels: &[usize],
    true_labels: &[usize],
    perm: &[usize],
    sizes: &[usize],
) -> Result<f64> {
    if est_labels.len() != true_labels.len() || est_labels.len() != sizes.len() {
        return Err(Error::DimensionMismatch {
            expected: true_labels.len(),
            got: est_labels.len().min(sizes.len()),
        });
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::InvalidConfig("no data points".into()));
    }
    let mut wrong = 0usize;
    for i in 0..est_labels.len() {
        let e = est_labels[i];
        if e >= perm.len() || true_labels[i] >= perm.len() {
            return Err(Error::DimensionMismatch {
                expected: perm.len(),
                got: e.max(true_labels[i]) + 1,
            });
        }
        if perm[e] != true_labels[i] {
            wrong += sizes[i];
        }
    }
    Ok(wrong as f64 / total as f64)
}

/// Predicted per-client label-error probability
/// p_e(n_i) = min(1, 4k * exp(-c * n_i * (1 ∧ Δ²/σ²)²)).
/// `sigma = 0` is treated as the noiseless limit where the ratio saturates
/// at 1. `c_cal` calibrates the unspecified absolute constant (default 1).
pub fn predicted_error_prob(n_i: usize, k: usize, delta: f64, sigma: f64, c_cal: f64) -> f64 {
    let ratio = if sigma == 0.0 {
        1.0
    } else {
        (delta * delta / (sigma * sigma)).min(1.0)
    };
    let value = 4.0 * k as f64 * (-c_cal * n_i as f64 * ratio * ratio).exp();
    value.min(1.0)
}

/// Covariance-weighted residual ||Sigma_j (theta*_j - theta)|| for a diagonal
/// Sigma_j; the quantity whose per-round decay the moment-descent tests track.
pub fn residual_norm(diag: &[f64], theta_star: &[f64], theta: &[f64]) -> Result<f64> {
    if diag.len() != theta_star.len() || diag.len() != theta.len() {
        return Err(Error::DimensionMismatch {
            expected: diag.len(),
            got: theta_star.len().min(theta.len()),
        });
    }
    Ok(diag
        .iter()
        .zip(theta_star.iter().zip(theta))
        .map(|(&s, (&a, &b))| {
            let v = s * (a - b);
            v * v
        })
        .sum::<f64>()
        .sqrt())
}

/// Full evaluation of an estimated model set and clustering against truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Permutation-invariant distance between estimated and true models.
    pub distance: f64,
    /// Minimizing permutation: best_permutation[j] is the estimated index
    /// matched to true cluster j.
    pub best_permutation: Vec<usize>,
    pub misclustering_mass: f64,
    /// Quantity skew chi^2(n) of the client sizes.
    pub chi2: f64,
    /// True per-cluster data mass N_j / N.
    pub per_cluster_mass: Vec<f64>,
    /// min_j N_j / N.
    pub rho: f64,
    /// sqrt(d k log k / M * (chi2 + 1)).
    pub nu_uniform_term: f64,
    /// (1/N) sum_i n_i p_e(n_i).
    pub pe_sum_term: f64,
}

/// Computes every report field from an estimate, a clustering, and the truth.
pub fn evaluate(
    est_thetas: &[Vec<f64>],
    est_labels: &[usize],
    truth: &GroundTruth,
    sizes: &[usize],
    sigma: f64,
    c_cal: f64,
) -> Result<EvalReport> {
    let k = truth.thetas.len();
    let (distance, best_permutation) = permutation_distance(est_thetas, &truth.thetas)?;
    // best_permutation maps true index -> estimated index; misclustering wants
    // the inverse direction (estimated label -> aligned true label).
    let mut inverse = vec![0usize; k];
    for (j, &pj) in best_permutation.iter().enumerate() {
        inverse[pj] = j;
    }
    let mis = misclustering_mass(est_labels, &truth.labels, &inverse, sizes)?;
    let chi2 = chi_squared_skew(sizes)?;
    let total: usize = sizes.iter().sum();
    let n = total as f64;
    let mut per_cluster_mass = vec![0.0; k];
    for (i, &z) in truth.labels.iter().enumerate() {
        per_cluster_mass[z] += sizes[i] as f64 / n;
    }
    let rho = per_cluster_mass.iter().copied().fold(f64::INFINITY, f64::min);
    let d = truth.thetas[0].len() as f64;
    let m = sizes.len() as f64;
    let nu_uniform_term = (d * k as f64 * (k as f64).ln() / m * (chi2 + 1.0)).sqrt();
    let pe_sum_term = sizes
        .iter()
        .map(|&ni| ni as f64 * predicted_error_prob(ni, k, truth.delta, sigma, c_cal))
        .sum::<f64>()
        / n;
    Ok(EvalReport {
        distance,
        best_permutation,
        misclustering_mass: mis,
        chi2,
        per_cluster_mass,
        rho,
        nu_uniform_term,
        pe_sum_term,
    })
}
