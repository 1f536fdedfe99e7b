//! Moment-descent phase: a set of anchor clients each descends toward its own
//! cluster's model using federated second-moment estimates, after which the
//! anchor iterates are greedily clustered into k coarse centers.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::linalg::{power_iteration, OrthonormalBasis};
use crate::metrics;
use crate::model::{ClientDataset, CovarianceSpec, GroundTruth};
use crate::rng;
use crate::subspace::{
    federated_orthogonal_iteration, residual_pair, ClientPairs, ResidualPairProvider,
    BYTES_PER_REAL,
};
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phase1Config {
    /// Number of clusters k.
    pub k: usize,
    /// Anchor count n_H.
    pub n_h: usize,
    /// Fresh two-point clients per round.
    pub m: usize,
    /// Local pair count per anchor per round.
    pub ell: usize,
    /// Descent rounds T.
    pub t: usize,
    /// Orthogonal-iteration rounds T1 (even).
    pub t1: usize,
    /// Power-iteration steps T2.
    pub t2: usize,
    /// Stopping constant, in (0, 1/4).
    pub epsilon: f64,
    /// Separation estimate used for stopping and clustering thresholds.
    pub delta_hint: f64,
    /// Covariance eigenvalue bounds used in the step size.
    pub alpha: f64,
    pub beta: f64,
    /// Model norm bound R; iterates must stay within (1 + 2 beta/alpha) R.
    pub r: f64,
    /// Common initial iterate, ||theta0|| <= R.
    pub theta0: Vec<f64>,
    /// Allow anchors and fresh clients to reuse data across rounds (off by
    /// default; desk-scale escape hatch).
    #[serde(default)]
    pub allow_data_reuse: bool,
}

impl Phase1Config {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n_h == 0 || self.m == 0 || self.ell == 0 {
            return Err(Error::InvalidConfig(
                "k, n_h, m, ell must be positive".into(),
            ));
        }
        if self.t1 == 0 || self.t1 % 2 != 0 {
            return Err(Error::InvalidConfig("T1 must be even and positive".into()));
        }
        if self.t2 == 0 {
            return Err(Error::InvalidConfig("T2 must be positive".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 0.25) {
            return Err(Error::InvalidConfig("epsilon must lie in (0, 1/4]".into()));
        }
        if !(self.delta_hint > 0.0) {
            return Err(Error::InvalidConfig("delta_hint must be > 0".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= self.beta) {
            return Err(Error::InvalidConfig(
                "step size needs 0 < alpha <= beta".into(),
            ));
        }
        if !(self.r > 0.0) {
            return Err(Error::InvalidConfig("R must be > 0".into()));
        }
        let norm = self.theta0.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > self.r {
            return Err(Error::InvalidConfig(format!(
                "||theta0|| = {norm} exceeds R = {}",
                self.r
            )));
        }
        if self.theta0.len() < self.k {
            return Err(Error::InvalidConfig(format!(
                "k = {} exceeds dimension {}",
                self.k,
                self.theta0.len()
            )));
        }
        Ok(())
    }

    /// Local points an anchor must hold up front.
    pub fn min_local(&self) -> usize {
        if self.allow_data_reuse {
            2 * self.ell
        } else {
            2 * self.ell * self.t
        }
    }
}

/// One anchor's evolving state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorState {
    pub client_index: usize,
    pub theta: Vec<f64>,
    /// Latest sigma-hat estimate; f64::MAX before the first measurement.
    pub sigma_hat: f64,
    /// Set once the stopping rule fires; theta never changes afterwards.
    pub frozen: bool,
    /// Number of rounds of local data consumed so far.
    pub rounds_used: usize,
}

/// Per-anchor, per-round trace record. Byte counts are cumulative over the
/// run at the time the row is written.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phase1RoundTrace {
    pub round: usize,
    pub anchor: usize,
    pub sigma_hat: f64,
    /// ||Sigma_{z_i}(theta*_{z_i} - theta_{i,t})|| when truth is available.
    pub residual_true: Option<f64>,
    pub frozen: bool,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

/// Step size eta_{i,t} = alpha * sigma_hat / (2 beta^2).
pub fn step_size(alpha: f64, beta: f64, sigma_hat: f64) -> f64 {
    alpha * sigma_hat / (2.0 * beta * beta)
}

/// Uniform without-replacement sample of `n_h` anchors among clients holding
/// at least `min_local` points.
pub fn select_anchors(
    clients: &[ClientDataset],
    n_h: usize,
    min_local: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let eligible: Vec<usize> = clients
        .iter()
        .enumerate()
        .filter(|(_, c)| c.n() >= min_local)
        .map(|(i, _)| i)
        .collect();
    if eligible.len() < n_h {
        return Err(Error::InsufficientAnchors {
            requested: n_h,
            eligible: eligible.len(),
            min_local,
        });
    }
    let mut rng = rng::stream(seed, &[rng::LBL_ANCHORS]);
    let picks = rand::seq::index::sample(&mut rng, eligible.len(), n_h);
    let mut out: Vec<usize> = picks.iter().map(|i| eligible[i]).collect();
    out.sort_unstable();
    Ok(out)
}

/// The k x k second-moment estimate
/// A = (1/ell) sum_{j < ell} (U^T eps(x_{2j}, y_{2j})) (U^T eps(x_{2j+1}, y_{2j+1}))^T
/// over ell disjoint point pairs starting at offset `start` of the anchor's
/// local data.
pub fn build_a(
    anchor: &ClientDataset,
    client_index: usize,
    theta: &Array1<f64>,
    u_hat: &OrthonormalBasis,
    ell: usize,
    round: usize,
    start: usize,
) -> Result<Array2<f64>> {
    let need = 2 * ell;
    if start + need > anchor.n() {
        return Err(Error::InsufficientLocalData {
            client: client_index,
            round,
            have: anchor.n().saturating_sub(start),
            need,
        });
    }
    let k = u_hat.rank();
    let ut = u_hat.columns().t();
    let mut a = Array2::zeros((k, k));
    for j in 0..ell {
        let i1 = start + 2 * j;
        let i2 = i1 + 1;
        let e1 = residual_pair(anchor.features.row(i1), anchor.responses[i1], theta)?;
        let e2 = residual_pair(anchor.features.row(i2), anchor.responses[i2], theta)?;
        let p1 = ut.dot(&e1);
        let p2 = ut.dot(&e2);
        for r in 0..k {
            for c in 0..k {
                a[[r, c]] += p1[r] * p2[c];
            }
        }
    }
    Ok(a / ell as f64)
}

/// Single-linkage clustering of the anchor iterates: edges where pairwise
/// distance < threshold, clusters = connected components ordered by smallest
/// member index, centers = unweighted component means. Fails unless exactly
/// `k` components emerge and every within-component distance stays below
/// twice the threshold.
pub fn greedy_cluster(
    anchor_thetas: &[Vec<f64>],
    threshold: f64,
    k: usize,
) -> Result<Vec<Vec<f64>>> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidConfig("clustering threshold must be > 0".into()));
    }
    let n = anchor_thetas.len();
    if n == 0 {
        return Err(Error::ClusterCountMismatch { expected: k, found: 0 });
    }
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    // Union-find over anchors.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if dist(&anchor_thetas[i], &anchor_thetas[j]) < threshold {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    // Group members by root, components ordered by smallest member index.
    let mut components: Vec<Vec<usize>> = Vec::new();
    let mut root_to_component: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        match root_to_component[r] {
            Some(c) => components[c].push(i),
            None => {
                root_to_component[r] = Some(components.len());
                components.push(vec![i]);
            }
        }
    }
    if components.len() != k {
        return Err(Error::ClusterCountMismatch {
            expected: k,
            found: components.len(),
        });
    }
    for (c, members) in components.iter().enumerate() {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                if dist(&anchor_thetas[i], &anchor_thetas[j]) >= 2.0 * threshold {
                    return Err(Error::ClusterDiameterExceeded { component: c });
                }
            }
        }
    }
    let d = anchor_thetas[0].len();
    Ok(components
        .iter()
        .map(|members| {
            let mut center = vec![0.0; d];
            for &i in members {
                for c in 0..d {
                    center[c] += anchor_thetas[i][c];
                }
            }
            for v in &mut center {
                *v /= members.len() as f64;
            }
            center
        })
        .collect())
}

fn advance_anchor(
    state: &AnchorState,
    clients: &[ClientDataset],
    fresh: &[usize],
    cfg: &Phase1Config,
    round: usize,
    seed: u64,
    truth: Option<(&GroundTruth, &CovarianceSpec)>,
) -> Result<(AnchorState, Phase1RoundTrace)> {
    let d = cfg.theta0.len();
    let anchor_data = &clients[state.client_index];
    let theta = Array1::from_vec(state.theta.clone());

    // Fresh clients each contribute the residual pair of their first two
    // points, evaluated at this anchor's current iterate.
    let mut pairs = Vec::with_capacity(fresh.len());
    for &f in fresh {
        let c = &clients[f];
        let e1 = residual_pair(c.features.row(0), c.responses[0], &theta)?;
        let e2 = residual_pair(c.features.row(1), c.responses[1], &theta)?;
        pairs.push(ClientPairs { pairs: vec![(e1, e2)] });
    }
    let provider = ResidualPairProvider::new(pairs)?;
    let anchor_seed = rng::derive_seed(seed, &[state.client_index as u64, round as u64]);

    let threshold = cfg.epsilon * cfg.delta_hint;
    let u_hat = match federated_orthogonal_iteration(&provider, cfg.k, cfg.t1, anchor_seed) {
        Ok((u, _)) => u,
        Err(Error::DegenerateRound { .. }) if state.sigma_hat <= threshold => {
            // The moment matrix vanished after the iterate already met the
            // stopping bar: the anchor has converged.
            let mut frozen = state.clone();
            frozen.frozen = true;
            let trace = trace_row(&frozen, cfg, round, 0, 0, truth);
            return Ok((frozen, trace));
        }
        Err(e) => return Err(e),
    };

    let start = if cfg.allow_data_reuse {
        0
    } else {
        state.rounds_used * 2 * cfg.ell
    };
    let a = build_a(
        anchor_data,
        state.client_index,
        &theta,
        &u_hat,
        cfg.ell,
        round,
        start,
    )?;
    let power = power_iteration(a.view(), cfg.t2, anchor_seed);
    // The iteration runs on A A^T, so power.sigma_sq estimates sigma_1(A)^2;
    // sigma_1(A) itself tracks ||Sigma(theta* - theta)||^2, hence the
    // quarter-power for the residual-scale estimate.
    let sigma_hat = power.sigma_sq.powf(0.25);
    let mut beta_hat = power.vector;

    // Power iteration leaves the sign of beta_hat arbitrary; align it with
    // the projected mean residual, whose expectation is U^T Sigma(theta* -
    // theta), so the update moves toward the anchor's own cluster.
    let mut mean_res = Array1::zeros(d);
    for j in 0..2 * cfg.ell {
        let idx = start + j;
        mean_res = mean_res
            + residual_pair(anchor_data.features.row(idx), anchor_data.responses[idx], &theta)?;
    }
    let projected = u_hat.columns().t().dot(&mean_res);
    if beta_hat.dot(&projected) < 0.0 {
        beta_hat.mapv_inplace(|x| -x);
    }

    let mut next = state.clone();
    next.sigma_hat = sigma_hat;
    next.rounds_used += 1;
    if sigma_hat > threshold {
        let eta = step_size(cfg.alpha, cfg.beta, sigma_hat);
        let direction = u_hat.columns().dot(&beta_hat);
        let updated = &theta + &direction.mapv(|x| x * eta);
        let norm = updated.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > (1.0 + 2.0 * cfg.beta / cfg.alpha) * cfg.r {
            return Err(Error::NormBoundExceeded {
                anchor: state.client_index,
                round,
            });
        }
        next.theta = updated.to_vec();
    } else {
        next.frozen = true;
    }

    let k = cfg.k as u64;
    let dm = d as u64;
    let t1 = cfg.t1 as u64;
    // Downlink per anchor-round: T1 basis broadcasts inside the inner
    // iteration, the final basis pushed to the fresh cohort, the basis handed
    // to the anchor, and the theta broadcast that defines the residuals.
    let bytes_down = ((t1 + 2) * dm * k + dm) * BYTES_PER_REAL;
    // Uplink: T1 per-client basis uploads plus the anchor's refreshed iterate.
    let bytes_up = (t1 * fresh.len() as u64 * dm * k + dm) * BYTES_PER_REAL;
    let trace = trace_row(&next, cfg, round, bytes_up, bytes_down, truth);
    Ok((next, trace))
}

fn trace_row(
    state: &AnchorState,
    cfg: &Phase1Config,
    round: usize,
    bytes_up: u64,
    bytes_down: u64,
    truth: Option<(&GroundTruth, &CovarianceSpec)>,
) -> Phase1RoundTrace {
    let residual_true = truth.map(|(gt, cov)| {
        let z = gt.labels[state.client_index];
        let diag = cov.diagonal(z, cfg.theta0.len());
        metrics::residual_norm(&diag, &gt.thetas[z], &state.theta)
            .expect("truth dimensions checked at run start")
    });
    Phase1RoundTrace {
        round,
        anchor: state.client_index,
        sigma_hat: state.sigma_hat,
        residual_true,
        frozen: state.frozen,
        bytes_up,
        bytes_down,
    }
}

/// One descent round over all anchors. Frozen anchors pass through untouched
/// (and cost no communication); unfrozen anchors run the inner subspace
/// iteration over the round's fresh clients and take one moment step.
/// Returned trace rows carry this round's per-anchor byte counts.
pub fn fedmd_round(
    states: &mut [AnchorState],
    clients: &[ClientDataset],
    fresh: &[usize],
    cfg: &Phase1Config,
    round: usize,
    seed: u64,
    truth: Option<(&GroundTruth, &CovarianceSpec)>,
) -> Result<Vec<Phase1RoundTrace>> {
    let results: Vec<Result<(AnchorState, Phase1RoundTrace)>> = states
        .par_iter()
        .map(|state| {
            if state.frozen {
                Ok((state.clone(), trace_row(state, cfg, round, 0, 0, truth)))
            } else {
                advance_anchor(state, clients, fresh, cfg, round, seed, truth)
            }
        })
        .collect();
    let mut trace = Vec::with_capacity(states.len());
    for (state, result) in states.iter_mut().zip(results) {
        let (next, row) = result?;
        *state = next;
        trace.push(row);
    }
    Ok(trace)
}

/// Output of a full moment-descent run. Clustering failure is an expected
/// probabilistic outcome, so it is carried alongside the states and trace
/// rather than discarding them.
#[derive(Debug)]
pub struct FedmdOutcome {
    /// The k coarse centers from clustering the anchor iterates, or the
    /// clustering failure.
    pub clustering: Result<Vec<Vec<f64>>>,
    pub states: Vec<AnchorState>,
    pub trace: Vec<Phase1RoundTrace>,
}

/// End-to-end moment descent: anchor selection, T rounds, greedy clustering
/// of the final iterates at threshold delta_hint / 2.
pub fn run_fedmd(
    clients: &[ClientDataset],
    cfg: &Phase1Config,
    seed: u64,
    truth: Option<(&GroundTruth, &CovarianceSpec)>,
) -> Result<FedmdOutcome> {
    cfg.validate()?;
    let d = cfg.theta0.len();
    for (i, c) in clients.iter().enumerate() {
        if c.n() == 0 {
            return Err(Error::EmptyClient { index: i });
        }
        if c.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: c.dim() });
        }
    }
    if let Some((gt, _)) = truth {
        if gt.labels.len() != clients.len() {
            return Err(Error::DimensionMismatch {
                expected: clients.len(),
                got: gt.labels.len(),
            });
        }
    }

    let anchors = select_anchors(clients, cfg.n_h, cfg.min_local(), seed)?;
    let mut states: Vec<AnchorState> = anchors
        .iter()
        .map(|&i| AnchorState {
            client_index: i,
            theta: cfg.theta0.clone(),
            sigma_hat: f64::MAX,
            frozen: false,
            rounds_used: 0,
        })
        .collect();

    // Fresh pool: non-anchor clients holding at least one residual pair.
    let anchor_set: std::collections::HashSet<usize> = anchors.iter().copied().collect();
    let mut pool: Vec<usize> = clients
        .iter()
        .enumerate()
        .filter(|(i, c)| !anchor_set.contains(i) && c.n() >= 2)
        .map(|(i, _)| i)
        .collect();

    let mut trace = Vec::new();
    let mut total_up = 0u64;
    let mut total_down = 0u64;
    for round in 1..=cfg.t {
        let fresh: Vec<usize> = if states.iter().all(|s| s.frozen) {
            Vec::new()
        } else {
            if pool.len() < cfg.m {
                return Err(Error::InsufficientFreshClients {
                    round,
                    available: pool.len(),
                    needed: cfg.m,
                });
            }
            let mut round_rng = rng::stream(seed, &[rng::LBL_FRESH, round as u64]);
            let picks = rand::seq::index::sample(&mut round_rng, pool.len(), cfg.m);
            let mut chosen: Vec<usize> = picks.iter().map(|i| pool[i]).collect();
            chosen.sort_unstable();
            if !cfg.allow_data_reuse {
                let used: std::collections::HashSet<usize> = chosen.iter().copied().collect();
                pool.retain(|i| !used.contains(i));
            }
            chosen
        };
        let mut rows = if fresh.is_empty() {
            states
                .iter()
                .map(|s| trace_row(s, cfg, round, 0, 0, truth))
                .collect()
        } else {
            fedmd_round(&mut states, clients, &fresh, cfg, round, seed, truth)?
        };
        // Convert per-round byte counts into run-cumulative totals.
        let round_up: u64 = rows.iter().map(|r| r.bytes_up).sum();
        let round_down: u64 = rows.iter().map(|r| r.bytes_down).sum();
        total_up += round_up;
        total_down += round_down;
        for row in &mut rows {
            row.bytes_up = total_up;
            row.bytes_down = total_down;
        }
        trace.extend(rows);
    }

    let thetas: Vec<Vec<f64>> = states.iter().map(|s| s.theta.clone()).collect();
    let clustering = greedy_cluster(&thetas, cfg.delta_hint / 2.0, cfg.k);
    Ok(FedmdOutcome {
        clustering,
        states,
        trace,
    })
}
