//! Federated orthogonal iteration: distributed top-k left-singular-subspace
//! estimation for a matrix that decomposes over clients' residual pairs.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::Error;
use crate::linalg::{self, OrthonormalBasis};
use crate::model::GroundTruth;
use crate::rng;
use crate::Result;

pub const BYTES_PER_REAL: u64 = 8;

/// Residual of a data point with respect to a model:
/// eps(x, y, theta) = (y - <phi(x), theta>) * phi(x).
pub fn residual_pair(features: ArrayView1<'_, f64>, response: f64, theta: &Array1<f64>) -> Result<Array1<f64>> {
    if features.len() != theta.len() {
        return Err(Error::DimensionMismatch {
            expected: theta.len(),
            got: features.len(),
        });
    }
    let scale = response - features.dot(theta);
    Ok(features.mapv(|x| x * scale))
}

/// One client's contribution to the distributed decomposition
/// Y = sum_i w_i (1/n_i) sum_j a_ij b_ij^T.
#[derive(Debug, Clone)]
pub struct ClientPairs {
    pub pairs: Vec<(Array1<f64>, Array1<f64>)>,
}

/// All participating clients' residual pairs, weighted by pair counts.
#[derive(Debug, Clone)]
pub struct ResidualPairProvider {
    clients: Vec<ClientPairs>,
    dim: usize,
}

impl ResidualPairProvider {
    pub fn new(clients: Vec<ClientPairs>) -> Result<Self> {
        let dim = clients
            .iter()
            .flat_map(|c| c.pairs.first())
            .map(|(a, _)| a.len())
            .next()
            .ok_or_else(|| Error::InvalidConfig("no residual pairs supplied".into()))?;
        for c in &clients {
            for (a, b) in &c.pairs {
                if a.len() != dim || b.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: a.len().max(b.len()),
                    });
                }
            }
        }
        Ok(Self { clients, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn client_count(&self) -> usize {
        self.clients.len()
    }

    fn total_pairs(&self) -> usize {
        self.clients.iter().map(|c| c.pairs.len()).sum()
    }

    /// Weights w_i = n_i / sum n_i in ascending client order.
    pub fn weights(&self) -> Vec<f64> {
        let total = self.total_pairs() as f64;
        self.clients
            .iter()
            .map(|c| c.pairs.len() as f64 / total)
            .collect()
    }

    /// Stacks all pairs in ascending client order: rows of `a` are a_ij, rows
    /// of `b_weighted` are (w_i / n_i) * b_ij. Flattening the per-client sums
    /// into two matrices turns each round's reduction into two small GEMMs
    /// while preserving the ascending summation order.
    fn stacked(&self) -> (Array2<f64>, Array2<f64>) {
        let total = self.total_pairs();
        let mut a = Array2::zeros((total, self.dim));
        let mut bw = Array2::zeros((total, self.dim));
        let weights = self.weights();
        let mut row = 0;
        for (i, c) in self.clients.iter().enumerate() {
            let scale = weights[i] / c.pairs.len() as f64;
            for (pa, pb) in &c.pairs {
                a.row_mut(row).assign(pa);
                bw.row_mut(row).assign(&pb.mapv(|x| x * scale));
                row += 1;
            }
        }
        (a, bw)
    }

    /// The assembled matrix Y = sum_i w_i (1/n_i) sum_j a_ij b_ij^T,
    /// materialized centrally. Test and oracle use only.
    pub fn assemble(&self) -> Array2<f64> {
        let (a, bw) = self.stacked();
        a.t().dot(&bw)
    }
}

/// Communication ledger for one invocation of the iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommStats {
    pub bytes_down: u64,
    pub bytes_up: u64,
}

/// Distributed orthogonal iteration on Y Y^T.
///
/// Even rounds: each client uploads (1/n_i) sum_j b_ij a_ij^T Q_t and the
/// server takes the weighted sum. Odd rounds use a_ij b_ij^T and the server
/// re-orthonormalizes by QR. `t1` must be even; the result is Q_{t1}.
///
/// Downlink counts t1 basis broadcasts; uplink counts t1 uploads of d x k per
/// client. 8 bytes per real. Delivery of the final basis to its consumers is
/// accounted by the caller.
pub fn federated_orthogonal_iteration(
    provider: &ResidualPairProvider,
    k: usize,
    t1: usize,
    seed: u64,
) -> Result<(OrthonormalBasis, CommStats)> {
    if t1 % 2 != 0 {
        return Err(Error::InvalidConfig("T1 must be even".into()));
    }
    let d = provider.dim();
    if k > d {
        return Err(Error::InvalidConfig(format!("k = {k} exceeds d = {d}")));
    }
    let (a, bw) = provider.stacked();
    let mut rng = rng::stream(seed, &[rng::LBL_OI]);
    let q0: Array2<f64> = Array2::from_shape_fn((d, k), |_| {
        rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal)
    });
    let mut q = linalg::qr_orthonormalize(&q0)?.columns().clone();
    for t in 0..t1 {
        if t % 2 == 0 {
            // sum_i w_i (1/n_i) sum_j b a^T Q = Bw^T (A Q)
            q = bw.t().dot(&a.dot(&q));
        } else {
            // sum_i w_i (1/n_i) sum_j a b^T Q = A^T (Bw Q)
            let z = a.t().dot(&bw.dot(&q));
            q = match linalg::qr_orthonormalize(&z) {
                Ok(basis) => basis.columns().clone(),
                Err(Error::RankDeficient) => {
                    return Err(Error::DegenerateRound { round: t });
                }
                Err(e) => return Err(e),
            };
        }
    }
    let per_basis = (d * k) as u64 * BYTES_PER_REAL;
    let stats = CommStats {
        bytes_down: t1 as u64 * per_basis,
        bytes_up: t1 as u64 * provider.client_count() as u64 * per_basis,
    };
    Ok((OrthonormalBasis::new(q)?, stats))
}

/// Analytic E[Y] = sum_j p_j Sigma_j (theta*_j - theta)(theta*_j - theta)^T Sigma_j
/// for diagonal covariances; the Monte Carlo oracle for the assembled moment
/// matrix.
pub fn expected_moment_matrix(
    theta: &Array1<f64>,
    truth: &GroundTruth,
    p: &[f64],
    covariance_diagonals: &[Vec<f64>],
) -> Result<Array2<f64>> {
    let d = theta.len();
    let k = truth.thetas.len();
    if p.len() != k || covariance_diagonals.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: p.len().min(covariance_diagonals.len()),
        });
    }
    let mut out = Array2::zeros((d, d));
    for j in 0..k {
        let tj = truth.theta(j);
        if tj.len() != d || covariance_diagonals[j].len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: tj.len() });
        }
        // v = Sigma_j (theta*_j - theta), Sigma_j diagonal.
        let v: Array1<f64> = Array1::from_iter(
            (0..d).map(|c| covariance_diagonals[j][c] * (tj[c] - theta[c])),
        );
        for r in 0..d {
            for c in 0..d {
                out[[r, c]] += p[j] * v[r] * v[c];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dense_top_k_left_singular, projector_distance};
    use ndarray::array;

    #[test]
    fn residual_pair_examples() {
        let theta = array![0.5, 0.0];
        let r = residual_pair(array![1.0, 0.0].view(), 2.0, &theta).unwrap();
        assert_eq!(r, array![1.5, 0.0]);

        let theta = array![2.0, 3.0];
        let phi = array![1.0, 2.0];
        let y = phi.dot(&theta);
        let r = residual_pair(phi.view(), y, &theta).unwrap();
        assert_eq!(r, array![0.0, 0.0]);

        let theta = array![0.0, 0.0];
        let r = residual_pair(array![2.0, 1.0].view(), 3.0, &theta).unwrap();
        assert_eq!(r, array![6.0, 3.0]);

        assert!(residual_pair(array![1.0].view(), 0.0, &array![1.0, 2.0]).is_err());
    }

    fn single_client_provider() -> ResidualPairProvider {
        // Y = (1/2)(a1 b1^T + a2 b2^T) = 2 e1 e1^T + 1 e2 e2^T in R^3.
        let a1 = array![4.0, 0.0, 0.0];
        let b1 = array![1.0, 0.0, 0.0];
        let a2 = array![0.0, 2.0, 0.0];
        let b2 = array![0.0, 1.0, 0.0];
        ResidualPairProvider::new(vec![ClientPairs {
            pairs: vec![(a1, b1), (a2, b2)],
        }])
        .unwrap()
    }

    #[test]
    fn recovers_leading_direction() {
        let provider = single_client_provider();
        let y = provider.assemble();
        let expect = array![
            [2.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0]
        ];
        assert_eq!(y, expect);
        let (q, _) = federated_orthogonal_iteration(&provider, 1, 200, 3).unwrap();
        let oracle = dense_top_k_left_singular(&y, 1).unwrap();
        assert!(projector_distance(&q, &oracle) < 1e-8);
    }

    #[test]
    fn full_rank_k_equals_d() {
        // Y full rank in R^2.
        let provider = ResidualPairProvider::new(vec![ClientPairs {
            pairs: vec![
                (array![3.0, 1.0], array![1.0, 0.5]),
                (array![0.0, 2.0], array![-0.5, 1.0]),
            ],
        }])
        .unwrap();
        let (q, _) = federated_orthogonal_iteration(&provider, 2, 50, 5).unwrap();
        let p = q.projector();
        let diff = &p - &Array2::<f64>::eye(2);
        assert!(diff.iter().all(|x| x.abs() < 1e-10));
    }

    #[test]
    fn zero_pairs_degenerate_at_first_odd_round() {
        let provider = ResidualPairProvider::new(vec![ClientPairs {
            pairs: vec![(Array1::zeros(3), Array1::zeros(3))],
        }])
        .unwrap();
        match federated_orthogonal_iteration(&provider, 1, 10, 3) {
            Err(Error::DegenerateRound { round }) => assert_eq!(round, 1),
            other => panic!("expected degenerate round, got {other:?}"),
        }
    }

    #[test]
    fn span_invariant_under_client_partition() {
        // Same pair multiset, three different partitions across clients.
        let pairs = vec![
            (array![1.0, 2.0, 0.0], array![1.0, 0.0, 0.5]),
            (array![0.0, 1.0, 1.0], array![2.0, 1.0, 0.0]),
            (array![1.0, 0.0, 3.0], array![0.0, 1.0, 1.0]),
            (array![2.0, 2.0, 1.0], array![1.0, 1.0, 1.0]),
        ];
        let one = ResidualPairProvider::new(vec![ClientPairs { pairs: pairs.clone() }]).unwrap();
        let two = ResidualPairProvider::new(vec![
            ClientPairs { pairs: pairs[..2].to_vec() },
            ClientPairs { pairs: pairs[2..].to_vec() },
        ])
        .unwrap();
        let four = ResidualPairProvider::new(
            pairs.iter().map(|p| ClientPairs { pairs: vec![p.clone()] }).collect(),
        )
        .unwrap();
        let (qa, _) = federated_orthogonal_iteration(&one, 2, 100, 9).unwrap();
        let (qb, _) = federated_orthogonal_iteration(&two, 2, 100, 9).unwrap();
        let (qc, _) = federated_orthogonal_iteration(&four, 2, 100, 9).unwrap();
        assert!(projector_distance(&qa, &qb) < 1e-8);
        assert!(projector_distance(&qa, &qc) < 1e-8);
    }

    #[test]
    fn comm_accounting() {
        let provider = single_client_provider();
        let (_, stats) = federated_orthogonal_iteration(&provider, 1, 10, 3).unwrap();
        let per_basis = 3 * 1 * 8;
        assert_eq!(stats.bytes_down, 10 * per_basis);
        assert_eq!(stats.bytes_up, 10 * per_basis);
    }

    #[test]
    fn expected_moment_trivials() {
        let truth = GroundTruth {
            thetas: vec![vec![1.0, 2.0]],
            labels: vec![],
            delta: 0.0,
            p_min: 1.0,
        };
        let m = expected_moment_matrix(
            &array![1.0, 2.0],
            &truth,
            &[1.0],
            &[vec![1.0, 1.0]],
        )
        .unwrap();
        assert!(m.iter().all(|&x| x == 0.0));

        let truth = GroundTruth {
            thetas: vec![vec![1.0, 0.0]],
            labels: vec![],
            delta: 0.0,
            p_min: 1.0,
        };
        let m = expected_moment_matrix(
            &array![0.0, 0.0],
            &truth,
            &[1.0],
            &[vec![1.0, 1.0]],
        )
        .unwrap();
        assert_eq!(m, array![[1.0, 0.0], [0.0, 0.0]]);
    }

    #[test]
    fn expected_moment_rank_bound() {
        // E[Y] for k clusters has at most k nonzero eigenvalues.
        let truth = GroundTruth {
            thetas: vec![
                vec![1.0, 0.0, 2.0, -1.0, 0.5],
                vec![0.0, 1.0, -1.0, 2.0, 1.0],
            ],
            labels: vec![],
            delta: 0.0,
            p_min: 0.5,
        };
        let theta = array![0.3, -0.2, 0.1, 0.0, 0.4];
        let diag = vec![vec![1.5, 0.8, 1.2, 1.0, 0.9]; 2];
        let m = expected_moment_matrix(&theta, &truth, &[0.5, 0.5], &diag).unwrap();
        let (eigs, _) = crate::linalg::sym_eigh(&m);
        assert!(eigs[0] > 0.0);
        for &e in &eigs[2..] {
            assert!(e.abs() <= 1e-10 * eigs[0]);
        }
    }
}
