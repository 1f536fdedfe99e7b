//! Refinement phase: iterative hard-label estimation plus FedAvg/FedProx local
//! updates, with the stacked closed-form global iteration as a cross-check
//! oracle.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::linalg::{operator_norm, solve_spd};
use crate::metrics;
use crate::model::{ClientDataset, GroundTruth};
use crate::Result;

pub const BYTES_PER_REAL: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase2Mode {
    FedAvg,
    FedProx,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phase2Config {
    pub mode: Phase2Mode,
    /// Learning rate eta > 0.
    pub eta: f64,
    /// Local gradient steps per round (FedAvg only), >= 1.
    #[serde(default = "default_s")]
    pub s: usize,
    /// Number of refinement rounds T'.
    pub t_prime: usize,
}

fn default_s() -> usize {
    1
}

impl Phase2Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::InvalidConfig("eta must be > 0".into()));
        }
        if self.mode == Phase2Mode::FedAvg && self.s == 0 {
            return Err(Error::InvalidConfig("s must be >= 1 for FedAvg".into()));
        }
        Ok(())
    }

    /// FedAvg stability margin gamma = eta * max_i ||phi(x_i)||^2 / n_i,
    /// which must stay below 1 for local gradient descent to contract.
    pub fn gamma(&self, clients: &[ClientDataset]) -> f64 {
        clients
            .iter()
            .map(|c| {
                let norm = operator_norm(&c.features);
                self.eta * norm * norm / c.n() as f64
            })
            .fold(0.0, f64::max)
    }

    /// Checks the instance-level stability invariant for FedAvg.
    pub fn validate_against(&self, clients: &[ClientDataset]) -> Result<()> {
        self.validate()?;
        if self.mode == Phase2Mode::FedAvg {
            let gamma = self.gamma(clients);
            if gamma >= 1.0 {
                return Err(Error::InvalidConfig(format!(
                    "FedAvg unstable: gamma = {gamma:.4} >= 1 (reduce eta)"
                )));
            }
        }
        Ok(())
    }
}

/// The server's current per-cluster models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub thetas: Vec<Vec<f64>>,
    pub round: usize,
}

impl GlobalModel {
    pub fn new(thetas: Vec<Vec<f64>>, round: usize) -> Result<Self> {
        if thetas.is_empty() {
            return Err(Error::InvalidConfig("global model needs k >= 1".into()));
        }
        let d = thetas[0].len();
        for t in &thetas {
            if t.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: t.len() });
            }
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidConfig("non-finite model entry".into()));
            }
        }
        Ok(Self { thetas, round })
    }

    pub fn k(&self) -> usize {
        self.thetas.len()
    }

    pub fn dim(&self) -> usize {
        self.thetas[0].len()
    }

    pub fn theta(&self, j: usize) -> Array1<f64> {
        Array1::from_vec(self.thetas[j].clone())
    }
}

/// One client's contribution to a round: its estimated label and its full
/// model set, where only the `label` slot differs from the broadcast.
#[derive(Debug, Clone)]
pub struct LocalReport {
    pub client_index: usize,
    pub label: usize,
    pub thetas: Vec<Vec<f64>>,
    /// w_i = n_i / N.
    pub weight: f64,
    /// Set when the client's local step violates gamma_i < 1; the run
    /// continues so the divergence stays observable.
    pub unstable: bool,
}

/// Hard label: argmin_j ||y_i - phi(x_i) theta_j||, lowest index on ties.
pub fn estimate_label(client: &ClientDataset, model: &GlobalModel) -> usize {
    let mut best = 0usize;
    let mut best_cost = f64::INFINITY;
    for j in 0..model.k() {
        let pred = client.features.dot(&model.theta(j));
        let cost = (&client.responses - &pred).mapv(|r| r * r).sum();
        if cost < best_cost {
            best_cost = cost;
            best = j;
        }
    }
    best
}

/// s steps of local gradient descent on the labeled slot with rate eta/n_i.
pub fn local_fedavg(
    client: &ClientDataset,
    client_index: usize,
    model: &GlobalModel,
    label: usize,
    eta: f64,
    s: usize,
    weight: f64,
) -> LocalReport {
    let n = client.n() as f64;
    let rate = eta / n;
    // Cheap screen first: the Frobenius norm dominates the spectral norm, so
    // most clients skip the power iteration entirely.
    let frob_sq: f64 = client.features.iter().map(|x| x * x).sum();
    let unstable = eta * frob_sq / n >= 1.0 && {
        let phi_norm = operator_norm(&client.features);
        eta * phi_norm * phi_norm / n >= 1.0
    };
    let mut theta = model.theta(label);
    for _ in 0..s {
        let residual = client.features.dot(&theta) - &client.responses;
        theta = &theta - &client.features.t().dot(&residual).mapv(|g| g * rate);
    }
    let mut thetas = model.thetas.clone();
    thetas[label] = theta.to_vec();
    LocalReport {
        client_index,
        label,
        thetas,
        weight,
        unstable,
    }
}

/// Exact proximal step on the labeled slot:
/// theta' = argmin ||phi theta - y||^2 / (2 n_i) * eta + ||theta - theta_b||^2 / 2,
/// i.e. (I + c phi^T phi) theta' = theta_b + c phi^T y with c = eta/n_i.
/// When n_i < d the equivalent n_i x n_i system is solved instead:
/// theta' = theta_b + c phi^T (I + c phi phi^T)^{-1} (y - phi theta_b).
pub fn local_fedprox(
    client: &ClientDataset,
    client_index: usize,
    model: &GlobalModel,
    label: usize,
    eta: f64,
    weight: f64,
) -> Result<LocalReport> {
    let n = client.n();
    let d = client.dim();
    let c = eta / n as f64;
    let theta_b = model.theta(label);
    let theta = if n < d {
        let gram = client.features.dot(&client.features.t());
        let mut sys = gram.mapv(|x| x * c);
        for i in 0..n {
            sys[[i, i]] += 1.0;
        }
        let rhs = &client.responses - &client.features.dot(&theta_b);
        let z = solve_spd(&sys, &rhs)?;
        &theta_b + &client.features.t().dot(&z).mapv(|x| x * c)
    } else {
        let gram = client.features.t().dot(&client.features);
        let mut sys = gram.mapv(|x| x * c);
        for i in 0..d {
            sys[[i, i]] += 1.0;
        }
        let rhs = &theta_b + &client.features.t().dot(&client.responses).mapv(|x| x * c);
        solve_spd(&sys, &rhs)?
    };
    let mut thetas = model.thetas.clone();
    thetas[label] = theta.to_vec();
    Ok(LocalReport {
        client_index,
        label,
        thetas,
        weight,
        unstable: false,
    })
}

/// Weighted aggregation theta_t = sum_i w_i theta_{i,t}, summed per slot in
/// ascending client-index order.
pub fn aggregate(reports: &[LocalReport], round: usize) -> Result<GlobalModel> {
    if reports.is_empty() {
        return Err(Error::InvalidConfig("aggregate of no reports".into()));
    }
    let weight_sum: f64 = reports.iter().map(|r| r.weight).sum();
    if (weight_sum - 1.0).abs() > 1e-12 {
        return Err(Error::WeightSum(weight_sum));
    }
    let k = reports[0].thetas.len();
    let d = reports[0].thetas[0].len();
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by_key(|&i| reports[i].client_index);
    let mut thetas = vec![vec![0.0; d]; k];
    for &i in &order {
        let r = &reports[i];
        if r.thetas.len() != k {
            return Err(Error::DimensionMismatch { expected: k, got: r.thetas.len() });
        }
        for j in 0..k {
            for c in 0..d {
                thetas[j][c] += r.weight * r.thetas[j][c];
            }
        }
    }
    GlobalModel::new(thetas, round)
}

/// The n_i x n_i polynomial of the local update map:
/// FedAvg: P_i = sum_{l=0}^{s-1} (I - (eta/n_i) phi phi^T)^l;
/// FedProx: P_i = (I + (eta/n_i) phi phi^T)^{-1}.
pub fn build_p(client: &ClientDataset, eta: f64, s: usize, mode: Phase2Mode) -> Result<Array2<f64>> {
    let n = client.n();
    let c = eta / n as f64;
    let gram = client.features.dot(&client.features.t());
    match mode {
        Phase2Mode::FedAvg => {
            let mut base = gram.mapv(|x| -c * x);
            for i in 0..n {
                base[[i, i]] += 1.0;
            }
            let mut p = Array2::eye(n);
            let mut power = Array2::eye(n);
            for _ in 1..s {
                power = power.dot(&base);
                p += &power;
            }
            Ok(p)
        }
        Phase2Mode::FedProx => {
            let mut sys = gram.mapv(|x| c * x);
            for i in 0..n {
                sys[[i, i]] += 1.0;
            }
            // Invert by solving against each identity column.
            let mut inv = Array2::zeros((n, n));
            for col in 0..n {
                let mut e = Array1::zeros(n);
                e[col] = 1.0;
                let x = solve_spd(&sys, &e)?;
                inv.column_mut(col).assign(&x);
            }
            Ok(inv)
        }
    }
}

/// One global round in closed form: for every cluster j,
/// theta_j' = theta_j - (eta/N) sum_{i: label_i = j} phi_i^T P_i (phi_i theta_j - y_i).
/// Clusters with no assigned clients are left unchanged. Test oracle for the
/// simulate-then-aggregate path.
pub fn closed_form_step(
    clients: &[ClientDataset],
    labels: &[usize],
    model: &GlobalModel,
    eta: f64,
    s: usize,
    mode: Phase2Mode,
) -> Result<GlobalModel> {
    if labels.len() != clients.len() {
        return Err(Error::DimensionMismatch {
            expected: clients.len(),
            got: labels.len(),
        });
    }
    let total: usize = clients.iter().map(|c| c.n()).sum();
    let scale = eta / total as f64;
    let mut thetas = model.thetas.clone();
    for j in 0..model.k() {
        let theta_j = model.theta(j);
        let mut update: Array1<f64> = Array1::zeros(model.dim());
        for (i, client) in clients.iter().enumerate() {
            if labels[i] != j {
                continue;
            }
            let p = build_p(client, eta, s, mode)?;
            let residual = client.features.dot(&theta_j) - &client.responses;
            update = update + client.features.t().dot(&p.dot(&residual));
        }
        let new_j = &theta_j - &update.mapv(|x| x * scale);
        thetas[j] = new_j.to_vec();
    }
    GlobalModel::new(thetas, model.round + 1)
}

/// Per-round record of the refinement phase. Byte counts are cumulative
/// within the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phase2RoundTrace {
    pub round: usize,
    pub distance_to_truth: Option<f64>,
    pub misclustering_mass: Option<f64>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub mode: Phase2Mode,
}

/// Output of a full refinement run.
#[derive(Debug, Clone)]
pub struct FedxOutcome {
    pub model: GlobalModel,
    /// Final per-client estimated labels.
    pub labels: Vec<usize>,
    /// Per-client final estimate theta_hat_i = theta_{label_i}.
    pub client_thetas: Vec<Vec<f64>>,
    pub trace: Vec<Phase2RoundTrace>,
}

/// T' rounds of broadcast -> estimate_label -> local update -> aggregate.
pub fn run_fedx(
    clients: &[ClientDataset],
    theta_start: &GlobalModel,
    cfg: &Phase2Config,
    truth: Option<&GroundTruth>,
) -> Result<FedxOutcome> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::InvalidConfig("no clients".into()));
    }
    let total: usize = clients.iter().map(|c| c.n()).sum();
    let sizes: Vec<usize> = clients.iter().map(|c| c.n()).collect();
    let k = theta_start.k();
    let d = theta_start.dim();
    let per_round_down = (k * d) as u64 * BYTES_PER_REAL;
    let per_round_up = (clients.len() * k * d) as u64 * BYTES_PER_REAL;

    let mut model = theta_start.clone();
    let mut labels: Vec<usize> = clients.iter().map(|c| estimate_label(c, &model)).collect();
    let mut trace = Vec::with_capacity(cfg.t_prime);
    let mut bytes_up = 0u64;
    let mut bytes_down = 0u64;

    for round in 1..=cfg.t_prime {
        let broadcast = model.clone();
        let mut reports: Vec<LocalReport> = clients
            .par_iter()
            .enumerate()
            .map(|(i, client)| {
                let label = estimate_label(client, &broadcast);
                let weight = client.n() as f64 / total as f64;
                match cfg.mode {
                    Phase2Mode::FedAvg => Ok(local_fedavg(
                        client, i, &broadcast, label, cfg.eta, cfg.s, weight,
                    )),
                    Phase2Mode::FedProx => {
                        local_fedprox(client, i, &broadcast, label, cfg.eta, weight)
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        reports.sort_by_key(|r| r.client_index);
        labels = reports.iter().map(|r| r.label).collect();
        model = aggregate(&reports, round)?;
        bytes_down += per_round_down;
        bytes_up += per_round_up;
        let (distance_to_truth, misclustering_mass) = match truth {
            Some(t) => {
                let report =
                    metrics::evaluate(&model.thetas, &labels, t, &sizes, 0.0, 1.0)?;
                (Some(report.distance), Some(report.misclustering_mass))
            }
            None => (None, None),
        };
        trace.push(Phase2RoundTrace {
            round,
            distance_to_truth,
            misclustering_mass,
            bytes_up,
            bytes_down,
            mode: cfg.mode,
        });
    }

    let client_thetas = labels.iter().map(|&l| model.thetas[l].clone()).collect();
    Ok(FedxOutcome {
        model,
        labels,
        client_thetas,
        trace,
    })
}
