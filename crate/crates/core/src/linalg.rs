//! Dense linear-algebra primitives shared by both phases.
//!
//! Everything here is desk-scale: matrices are small enough that Householder
//! QR, Jacobi sweeps and explicit Cholesky factorizations are the right tools.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Error;
use crate::rng;
use crate::Result;

/// Relative threshold below which a QR diagonal entry counts as a lost rank.
const RANK_TOL: f64 = 1e-12;

/// A d x r matrix with orthonormal columns.
#[derive(Debug, Clone)]
pub struct OrthonormalBasis {
    columns: Array2<f64>,
}

impl OrthonormalBasis {
    /// Wraps a matrix, checking ||Q^T Q - I|| <= 1e-10 entrywise.
    pub fn new(columns: Array2<f64>) -> Result<Self> {
        let gram = columns.t().dot(&columns);
        let r = columns.ncols();
        for i in 0..r {
            for j in 0..r {
                let target = if i == j { 1.0 } else { 0.0 };
                if (gram[[i, j]] - target).abs() > 1e-10 {
                    return Err(Error::InvalidConfig(
                        "columns are not orthonormal".to_string(),
                    ));
                }
            }
        }
        Ok(Self { columns })
    }

    pub fn columns(&self) -> &Array2<f64> {
        &self.columns
    }

    pub fn dim(&self) -> usize {
        self.columns.nrows()
    }

    pub fn rank(&self) -> usize {
        self.columns.ncols()
    }

    /// The orthogonal projector Q Q^T onto the spanned subspace.
    pub fn projector(&self) -> Array2<f64> {
        self.columns.dot(&self.columns.t())
    }

    /// Projects a vector onto the spanned subspace.
    pub fn project(&self, v: &Array1<f64>) -> Array1<f64> {
        self.columns.dot(&self.columns.t().dot(v))
    }
}

/// Householder QR restricted to what callers need: the thin orthonormal factor.
///
/// The sign convention (nonnegative diagonal of R) makes the output unique for
/// full-rank input, so repeated runs are bit-identical.
pub fn qr_orthonormalize(a: &Array2<f64>) -> Result<OrthonormalBasis> {
    let (m, n) = (a.nrows(), a.ncols());
    if n > m {
        return Err(Error::DimensionMismatch { expected: m, got: n });
    }
    let mut r = a.clone();
    // Householder vectors, one per column.
    let mut vs: Vec<Array1<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut v = Array1::zeros(m);
        let norm_x: f64 = (j..m).map(|i| r[[i, j]] * r[[i, j]]).sum::<f64>().sqrt();
        if norm_x > 0.0 {
            let alpha = if r[[j, j]] >= 0.0 { -norm_x } else { norm_x };
            for i in j..m {
                v[i] = r[[i, j]];
            }
            v[j] -= alpha;
            let vnorm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if vnorm > 0.0 {
                v.mapv_inplace(|x| x / vnorm);
                // Apply reflector to the remaining columns of R.
                for c in j..n {
                    let dot: f64 = (j..m).map(|i| v[i] * r[[i, c]]).sum();
                    for i in j..m {
                        r[[i, c]] -= 2.0 * v[i] * dot;
                    }
                }
            }
        }
        vs.push(v);
    }
    let max_diag = (0..n).map(|j| r[[j, j]].abs()).fold(0.0_f64, f64::max);
    if max_diag == 0.0 {
        return Err(Error::RankDeficient);
    }
    for j in 0..n {
        if r[[j, j]].abs() <= RANK_TOL * max_diag {
            return Err(Error::RankDeficient);
        }
    }
    // Form Q = H_0 ... H_{n-1} [I_n; 0].
    let mut q = Array2::zeros((m, n));
    for j in 0..n {
        q[[j, j]] = 1.0;
    }
    for j in (0..n).rev() {
        let v = &vs[j];
        for c in 0..n {
            let dot: f64 = (j..m).map(|i| v[i] * q[[i, c]]).sum();
            for i in j..m {
                q[[i, c]] -= 2.0 * v[i] * dot;
            }
        }
    }
    // Nonnegative-diagonal convention.
    for j in 0..n {
        if r[[j, j]] < 0.0 {
            for i in 0..m {
                q[[i, j]] = -q[[i, j]];
            }
        }
    }
    OrthonormalBasis::new(q)
}

/// Output of [`power_iteration`].
#[derive(Debug, Clone)]
pub struct PowerIterationOutput {
    /// Unit-norm estimate of the leading left singular vector of the operator.
    pub vector: Array1<f64>,
    /// Rayleigh quotient v^T (B B^T) v, the squared leading singular value.
    pub sigma_sq: f64,
    /// Set when the operator is numerically zero; `vector` is then arbitrary.
    pub degenerate: bool,
}

/// Power iteration on B B^T for a square operator B.
///
/// Runs `t2` multiply-and-normalize steps from a seeded random start. The
/// start is redrawn once if its image under the operator is negligible; a zero
/// operator yields `sigma_sq = 0` with the degeneracy flag set.
pub fn power_iteration(b: ArrayView2<'_, f64>, t2: usize, seed: u64) -> PowerIterationOutput {
    let r = b.nrows();
    assert!(r >= 1 && t2 >= 1, "operator dimension and T2 must be >= 1");
    assert_eq!(b.ncols(), r, "operator must be square");
    let scale = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut rng = rng::stream(seed, &[rng::LBL_POWER]);
    let mut v = random_unit_vector(&mut rng, r);
    if scale == 0.0 {
        return PowerIterationOutput {
            vector: v,
            sigma_sq: 0.0,
            degenerate: true,
        };
    }
    let image_norm = |v: &Array1<f64>| -> f64 {
        let w = b.t().dot(v);
        b.dot(&w).iter().map(|x| x * x).sum::<f64>().sqrt()
    };
    if image_norm(&v) <= 1e-12 * scale * scale {
        v = random_unit_vector(&mut rng, r);
    }
    for _ in 0..t2 {
        let w = b.dot(&b.t().dot(&v));
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Start fell entirely in the kernel; keep the current direction.
            break;
        }
        v = w / norm;
    }
    let sigma_sq = v.dot(&b.dot(&b.t().dot(&v))).max(0.0);
    PowerIterationOutput {
        vector: v,
        sigma_sq,
        degenerate: false,
    }
}

fn random_unit_vector<R: Rng>(rng: &mut R, dim: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = Array1::from_iter((0..dim).map(|_| rng.sample(StandardNormal)));
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v / norm;
        }
    }
}

/// Central orthogonal iteration: Q_{t+1} R = Y Q_t, repeated `t` times.
pub fn orthogonal_iteration(
    y: ArrayView2<'_, f64>,
    k: usize,
    t: usize,
    seed: u64,
) -> Result<OrthonormalBasis> {
    let d = y.nrows();
    let mut rng = rng::stream(seed, &[rng::LBL_OI]);
    let q0: Array2<f64> =
        Array2::from_shape_fn((d, k), |_| rng.sample::<f64, _>(StandardNormal));
    let mut q = qr_orthonormalize(&q0)?;
    for _ in 0..t {
        q = qr_orthonormalize(&y.dot(q.columns()))?;
    }
    Ok(q)
}

/// Exact top-k left singular vectors via one-sided Jacobi SVD.
///
/// Reference oracle for subspace code: slow but self-contained and accurate.
pub fn dense_top_k_left_singular(a: &Array2<f64>, k: usize) -> Result<OrthonormalBasis> {
    let (m, n) = (a.nrows(), a.ncols());
    if k == 0 || k > m.min(n) {
        return Err(Error::InvalidConfig(format!(
            "k = {k} out of range for a {m} x {n} matrix"
        )));
    }
    if m >= n {
        let (u, sigma) = one_sided_jacobi(a);
        top_k_columns(&u, &sigma, k)
    } else {
        // Left singular vectors of A from the right singular vectors of A^T:
        // u_i = A v_i / sigma_i.
        let at = a.t().to_owned();
        let (v, sigma) = one_sided_jacobi(&at);
        let mut u = Array2::zeros((m, k));
        let mut order: Vec<usize> = (0..sigma.len()).collect();
        order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap());
        for (col, &idx) in order.iter().take(k).enumerate() {
            if sigma[idx] <= RANK_TOL * sigma[order[0]].max(f64::MIN_POSITIVE) {
                return Err(Error::RankDeficient);
            }
            let ui = a.dot(&v.column(idx).to_owned()) / sigma[idx];
            u.column_mut(col).assign(&ui);
        }
        // Re-orthonormalize to absorb roundoff from the back-substitution.
        qr_orthonormalize(&u)
    }
}

/// One-sided (Hestenes) Jacobi: rotates columns of A until pairwise orthogonal.
/// Returns normalized columns and their norms (the singular values, unsorted).
fn one_sided_jacobi(a: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut w = a.clone();
    let n = w.ncols();
    let frob: f64 = w.iter().map(|x| x * x).sum();
    let tol = 1e-28 * frob.max(f64::MIN_POSITIVE);
    for _sweep in 0..60 {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let col_p = w.column(p).to_owned();
                let col_q = w.column(q).to_owned();
                let app: f64 = col_p.dot(&col_p);
                let aqq: f64 = col_q.dot(&col_q);
                let apq: f64 = col_p.dot(&col_q);
                off = off.max(apq * apq / (app * aqq).max(f64::MIN_POSITIVE));
                if apq.abs() <= 1e-30 {
                    continue;
                }
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..w.nrows() {
                    let wip = w[[i, p]];
                    let wiq = w[[i, q]];
                    w[[i, p]] = c * wip - s * wiq;
                    w[[i, q]] = s * wip + c * wiq;
                }
            }
        }
        if off < tol.max(1e-30) {
            break;
        }
    }
    let sigma: Vec<f64> = (0..n)
        .map(|j| w.column(j).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    for j in 0..n {
        if sigma[j] > 0.0 {
            let inv = 1.0 / sigma[j];
            w.column_mut(j).mapv_inplace(|x| x * inv);
        }
    }
    (w, sigma)
}

fn top_k_columns(u: &Array2<f64>, sigma: &[f64], k: usize) -> Result<OrthonormalBasis> {
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap());
    let leading = sigma[order[0]].max(f64::MIN_POSITIVE);
    let mut out = Array2::zeros((u.nrows(), k));
    for (col, &idx) in order.iter().take(k).enumerate() {
        if sigma[idx] <= RANK_TOL * leading {
            return Err(Error::RankDeficient);
        }
        out.column_mut(col).assign(&u.column(idx));
    }
    OrthonormalBasis::new(out)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues descending, eigenvectors as matching columns).
pub fn sym_eigh(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(a.ncols(), n, "matrix must be square");
    let mut m = a.clone();
    let mut v: Array2<f64> = Array2::eye(n);
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-15 * scale.max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(m[[p, q]].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[[p, q]].abs() <= tol * 1e-2 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let mip = m[[i, p]];
                    let miq = m[[i, q]];
                    m[[i, p]] = c * mip - s * miq;
                    m[[i, q]] = s * mip + c * miq;
                }
                for j in 0..n {
                    let mpj = m[[p, j]];
                    let mqj = m[[q, j]];
                    m[[p, j]] = c * mpj - s * mqj;
                    m[[q, j]] = s * mpj + c * mqj;
                }
                for i in 0..n {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, usize)> = (0..n).map(|i| (m[[i, i]], i)).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let eigvals: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut eigvecs = Array2::zeros((n, n));
    for (col, &(_, idx)) in pairs.iter().enumerate() {
        eigvecs.column_mut(col).assign(&v.column(idx));
    }
    (eigvals, eigvecs)
}

/// Solves A x = b for symmetric positive-definite A via Cholesky.
pub fn solve_spd(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: b.len(),
        });
    }
    let mut l: Array2<f64> = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::RankDeficient);
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[[i, k]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    let mut x = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= l[[k, i]] * x[k];
        }
        x[i] = sum / l[[i, i]];
    }
    Ok(x)
}

/// Operator (spectral) norm, computed by power iteration with a fixed stream.
pub fn operator_norm(a: &Array2<f64>) -> f64 {
    let (m, n) = (a.nrows(), a.ncols());
    if a.iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    // Work on the smaller Gram matrix.
    let gram = if m <= n {
        a.dot(&a.t())
    } else {
        a.t().dot(a)
    };
    let out = power_iteration(gram.view(), 300, 0x6f70_6e6f);
    // sigma_sq is the Rayleigh quotient of gram * gram^T, i.e. lambda_1(gram)^2,
    // and lambda_1(gram) is the squared spectral norm of A.
    out.sigma_sq.sqrt().sqrt()
}

/// ||P_a - P_b|| for the projectors of two bases; the subspace comparison
/// used throughout the tests.
pub fn projector_distance(a: &OrthonormalBasis, b: &OrthonormalBasis) -> f64 {
    let diff = a.projector() - b.projector();
    operator_norm(&diff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn max_abs(a: &Array2<f64>) -> f64 {
        a.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
    }

    #[test]
    fn qr_idempotent_on_orthonormal_input() {
        let a = array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
        let q = qr_orthonormalize(&a).unwrap();
        let diff = q.columns() - &a;
        assert!(max_abs(&diff) < 1e-12);
    }

    #[test]
    fn qr_axis_aligned_scaling() {
        let a = array![[2.0, 0.0], [0.0, 3.0], [0.0, 0.0]];
        let q = qr_orthonormalize(&a).unwrap();
        let expect = array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
        let diff = q.columns() - &expect;
        assert!(max_abs(&diff) < 1e-12);
    }

    #[test]
    fn qr_rejects_rank_deficiency() {
        let a = array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        assert!(matches!(qr_orthonormalize(&a), Err(Error::RankDeficient)));
    }

    /// Modified Gram-Schmidt, the independent span oracle.
    fn mgs(a: &Array2<f64>) -> Array2<f64> {
        let (m, n) = (a.nrows(), a.ncols());
        let mut q = a.clone();
        for j in 0..n {
            for i in 0..j {
                let qi = q.column(i).to_owned();
                let dot = qi.dot(&q.column(j));
                for r in 0..m {
                    q[[r, j]] -= dot * qi[r];
                }
            }
            let norm = q.column(j).iter().map(|x| x * x).sum::<f64>().sqrt();
            q.column_mut(j).mapv_inplace(|x| x / norm);
        }
        q
    }

    #[test]
    fn qr_span_matches_gram_schmidt() {
        let mut rng = crate::rng::stream(11, &[99]);
        for _ in 0..20 {
            let a: Array2<f64> =
                Array2::from_shape_fn((6, 3), |_| rng.sample::<f64, _>(StandardNormal));
            let q = qr_orthonormalize(&a).unwrap();
            let g = mgs(&a);
            let p_q = q.projector();
            let p_g = g.dot(&g.t());
            assert!(max_abs(&(p_q - p_g)) < 1e-10);
        }
    }

    #[test]
    fn power_iteration_diagonal() {
        let a = array![[3.0, 0.0], [0.0, 1.0]];
        let out = power_iteration(a.view(), 100, 5);
        assert!((out.sigma_sq - 9.0).abs() < 1e-8);
        assert!((out.vector[0].abs() - 1.0).abs() < 1e-8);
        assert!(out.vector[1].abs() < 1e-8);
        assert!(!out.degenerate);
    }

    #[test]
    fn power_iteration_zero_operator() {
        let a = Array2::zeros((3, 3));
        let out = power_iteration(a.view(), 10, 5);
        assert_eq!(out.sigma_sq, 0.0);
        assert!(out.degenerate);
    }

    #[test]
    fn power_iteration_isotropic() {
        let c = 2.5;
        let a = Array2::eye(2) * c;
        for t2 in [1, 3, 17] {
            let out = power_iteration(a.view(), t2, 5);
            assert_eq!(out.sigma_sq, c * c);
        }
    }

    #[test]
    fn rayleigh_nondecreasing_in_t2() {
        let mut rng = crate::rng::stream(3, &[1]);
        let b: Array2<f64> =
            Array2::from_shape_fn((5, 5), |_| rng.sample::<f64, _>(StandardNormal));
        let psd = b.dot(&b.t());
        let mut prev = 0.0;
        for t2 in 1..15 {
            let out = power_iteration(psd.view(), t2, 77);
            assert!(out.sigma_sq >= prev - 1e-9);
            prev = out.sigma_sq;
        }
    }

    #[test]
    fn top_k_of_diagonal() {
        let a = array![[5.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]];
        let u = dense_top_k_left_singular(&a, 2).unwrap();
        let p = u.projector();
        let expect = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]];
        assert!(max_abs(&(p - expect)) < 1e-10);
    }

    #[test]
    fn top_k_of_rank_one() {
        let u = array![3.0, 4.0, 0.0];
        let v = array![1.0, 2.0];
        let mut a = Array2::zeros((3, 2));
        for i in 0..3 {
            for j in 0..2 {
                a[[i, j]] = u[i] * v[j];
            }
        }
        let basis = dense_top_k_left_singular(&a, 1).unwrap();
        let col = basis.columns().column(0);
        let unit = &u / 5.0;
        let aligned = col.dot(&unit).abs();
        assert!((aligned - 1.0).abs() < 1e-10);
    }

    /// Two-sided Jacobi on A A^T, written here so the SVD check has an
    /// implementation-independent reference.
    #[test]
    fn top_k_matches_jacobi_on_gram() {
        let mut rng = crate::rng::stream(7, &[2]);
        let a: Array2<f64> =
            Array2::from_shape_fn((8, 8), |_| rng.sample::<f64, _>(StandardNormal));
        let gram = a.dot(&a.t());
        let (_, vecs) = sym_eigh(&gram);
        let oracle = vecs.slice(ndarray::s![.., ..3]).to_owned();
        let p_oracle = oracle.dot(&oracle.t());
        let u = dense_top_k_left_singular(&a, 3).unwrap();
        assert!(max_abs(&(u.projector() - p_oracle)) < 1e-8);
    }

    #[test]
    fn orthogonal_iteration_converges_with_gap() {
        // PSD Y with eigengap lambda_k / lambda_{k+1} >= 2 at k = 3.
        let mut rng = crate::rng::stream(13, &[4]);
        let g: Array2<f64> =
            Array2::from_shape_fn((6, 6), |_| rng.sample::<f64, _>(StandardNormal));
        let q = qr_orthonormalize(&g).unwrap();
        let eig = [16.0, 12.0, 8.0, 4.0, 2.0, 1.0];
        let mut y = Array2::zeros((6, 6));
        for (idx, &lambda) in eig.iter().enumerate() {
            let u = q.columns().column(idx).to_owned();
            for i in 0..6 {
                for j in 0..6 {
                    y[[i, j]] += lambda * u[i] * u[j];
                }
            }
        }
        let qt = orthogonal_iteration(y.view(), 3, 200, 21).unwrap();
        let u1 = q.columns().slice(ndarray::s![.., ..3]).to_owned();
        let p1 = u1.dot(&u1.t());
        assert!(max_abs(&(qt.projector() - p1)) < 1e-8);
    }

    #[test]
    fn spd_solve_roundtrip() {
        let mut rng = crate::rng::stream(17, &[6]);
        let b: Array2<f64> =
            Array2::from_shape_fn((5, 5), |_| rng.sample::<f64, _>(StandardNormal));
        let a = b.dot(&b.t()) + Array2::<f64>::eye(5);
        let x_true: Array1<f64> =
            Array1::from_iter((0..5).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let rhs = a.dot(&x_true);
        let x = solve_spd(&a, &rhs).unwrap();
        for i in 0..5 {
            assert!((x[i] - x_true[i]).abs() < 1e-9);
        }
    }
}
