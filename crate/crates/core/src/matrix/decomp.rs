//! Decomposition kernels: rank-revealing reduced QR (Householder),
//! thin SVD (one-sided Jacobi), symmetric eigendecomposition (cyclic Jacobi).

use super::{Matrix, MatrixError};

const JACOBI_SVD_TOL: f64 = 1e-15;
const JACOBI_SVD_MAX_SWEEPS: usize = 64;
const JACOBI_EIG_OFF_TOL: f64 = 1e-12;
const JACOBI_EIG_MAX_SWEEPS: usize = 64;

/// Reduced QR factorization `input = q · r_upper` restricted to the
/// numerically independent columns.
#[derive(Debug, Clone)]
pub struct QrResult {
    /// Orthonormal basis of the retained column space, `rows × rank`.
    pub q: Matrix,
    /// Coordinate matrix, `rank × cols`; upper triangular with nonnegative
    /// pivots. Columns judged dependent keep only their in-span coordinates.
    pub r_upper: Matrix,
    /// Number of retained columns.
    pub rank: usize,
}

impl QrResult {
    /// True when every column fell below the rank tolerance.
    pub fn is_rank_zero(&self) -> bool {
        self.rank == 0
    }
}

/// Thin singular value decomposition `input = u · diag(sigma) · vᵀ`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// Left singular vectors, `rows × ℓ` orthonormal, ℓ = min(rows, cols).
    pub u: Matrix,
    /// Singular values, nonincreasing, length ℓ.
    pub sigma: Vec<f64>,
    /// Right singular vectors, `cols × ℓ` orthonormal.
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut scaled = self.u.clone();
        for (j, &s) in self.sigma.iter().enumerate() {
            scaled.scale_column(j, s);
        }
        scaled.matmul(&self.v.transpose())
    }
}

/// Symmetric eigendecomposition `input = vectors · diag(values) · vectorsᵀ`.
#[derive(Debug, Clone)]
pub struct EigResult {
    /// Eigenvalues, nonincreasing.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors, column `j` paired with `values[j]`.
    pub vectors: Matrix,
}

/// Householder QR that keeps only columns whose residual against the basis
/// built so far exceeds `rank_tol` times the largest column norm of the
/// input. Dependent columns still receive coordinates in `r_upper`, so
/// `q · r_upper` reproduces the input up to the discarded residuals.
///
/// Pivot signs are flipped so the diagonal of `r_upper` is nonnegative,
/// which makes the factorization a deterministic representative.
pub fn reduced_qr(b: &Matrix, rank_tol: f64) -> Result<QrResult, MatrixError> {
    assert!(rank_tol > 0.0, "rank_tol must be positive");
    if b.cols() == 0 {
        return Err(MatrixError::EmptyInput);
    }
    b.check_finite()?;

    let d = b.rows();
    let n = b.cols();
    let mut w = b.clone();

    let max_col_norm = (0..n).map(|j| b.col_norm(j)).fold(0.0f64, f64::max);
    if max_col_norm == 0.0 {
        return Ok(QrResult {
            q: Matrix::zeros(d, 0),
            r_upper: Matrix::zeros(0, n),
            rank: 0,
        });
    }
    let threshold = rank_tol * max_col_norm;

    // Householder vectors with their starting row, for accumulating Q later.
    let mut reflectors: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut pivot_cols: Vec<usize> = Vec::new();

    for j in 0..n {
        let step = reflectors.len();
        if step == d {
            break;
        }
        let residual: f64 = (step..d).map(|i| w.get(i, j).powi(2)).sum::<f64>().sqrt();
        if residual <= threshold {
            continue; // dependent column: keep coordinates, no new direction
        }

        // Householder vector v so that (I - 2vvᵀ/vᵀv) maps w[step.., j] to
        // ±residual·e1.
        let x0 = w.get(step, j);
        let alpha = if x0 >= 0.0 { -residual } else { residual };
        let mut v = vec![0.0; d - step];
        for i in step..d {
            v[i - step] = w.get(i, j);
        }
        v[0] -= alpha;
        let v_norm_sq: f64 = v.iter().map(|x| x * x).sum();
        if v_norm_sq > 0.0 {
            // Apply to all columns: later columns gain their R entries,
            // earlier dependent columns get correct full coordinates, and
            // earlier pivots are untouched (zero below their pivot row).
            for col in 0..n {
                let dot: f64 = (step..d).map(|i| v[i - step] * w.get(i, col)).sum();
                let coeff = 2.0 * dot / v_norm_sq;
                for i in step..d {
                    let val = w.get(i, col) - coeff * v[i - step];
                    w.set(i, col, val);
                }
            }
        }
        // Pin the pivot exactly; roundoff below it is noise by construction.
        w.set(step, j, alpha);
        for i in step + 1..d {
            w.set(i, j, 0.0);
        }
        reflectors.push((step, v));
        pivot_cols.push(j);
    }

    let k = reflectors.len();

    // Q = H_1 · H_2 · … · H_k applied to the first k identity columns.
    let mut q = Matrix::zeros(d, k);
    for j in 0..k {
        q.set(j, j, 1.0);
    }
    for (step, v) in reflectors.iter().rev() {
        let v_norm_sq: f64 = v.iter().map(|x| x * x).sum();
        if v_norm_sq == 0.0 {
            continue;
        }
        for col in 0..k {
            let dot: f64 = (*step..d).map(|i| v[i - step] * q.get(i, col)).sum();
            let coeff = 2.0 * dot / v_norm_sq;
            for i in *step..d {
                let val = q.get(i, col) - coeff * v[i - step];
                q.set(i, col, val);
            }
        }
    }

    let mut r_upper = Matrix::zeros(k, n);
    for i in 0..k {
        for j in 0..n {
            r_upper.set(i, j, w.get(i, j));
        }
    }

    // Sign convention: nonnegative pivots.
    for (i, &pj) in pivot_cols.iter().enumerate() {
        if r_upper.get(i, pj) < 0.0 {
            for j in 0..n {
                let val = -r_upper.get(i, j);
                r_upper.set(i, j, val);
            }
            for row in 0..d {
                let val = -q.get(row, i);
                q.set(row, i, val);
            }
        }
    }

    Ok(QrResult { q, r_upper, rank: k })
}

/// Thin SVD via one-sided Jacobi rotations: orthogonalizes the columns of
/// the (possibly transposed) input, then reads singular values off the
/// column norms. Columns of `u` follow the sign convention that their first
/// nonzero entry is nonnegative.
pub fn thin_svd(m: &Matrix) -> Result<SvdResult, MatrixError> {
    m.check_finite()?;
    let transposed = m.rows() < m.cols();
    let a0 = if transposed { m.transpose() } else { m.clone() };
    let (mut a, mut v) = jacobi_orthogonalize(a0);

    let d = a.rows();
    let n = a.cols();

    // Column norms are the singular values; sort nonincreasing.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|j| a.col_norm(j)).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));
    a = a.select_columns(&order);
    v = v.select_columns(&order);
    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();

    // Normalize the nonzero columns into u; complete the basis for the rest.
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let negligible = sigma_max * 1e-14;
    let mut u = Matrix::zeros(d, n);
    let mut filled: Vec<usize> = Vec::new();
    for j in 0..n {
        if sigma[j] > negligible && sigma[j] > 0.0 {
            for i in 0..d {
                u.set(i, j, a.get(i, j) / sigma[j]);
            }
            filled.push(j);
        }
    }
    complete_orthonormal_columns(&mut u, &mut filled);

    let (mut u_out, mut v_out) = if transposed { (v, u) } else { (u, v) };

    // Sign convention on u: first nonzero entry nonnegative.
    for j in 0..u_out.cols() {
        let lead = (0..u_out.rows()).map(|i| u_out.get(i, j)).find(|x| *x != 0.0);
        if let Some(x) = lead {
            if x < 0.0 {
                for i in 0..u_out.rows() {
                    let val = -u_out.get(i, j);
                    u_out.set(i, j, val);
                }
                for i in 0..v_out.rows() {
                    let val = -v_out.get(i, j);
                    v_out.set(i, j, val);
                }
            }
        }
    }

    Ok(SvdResult { u: u_out, sigma, v: v_out })
}

/// One-sided Jacobi sweeps: returns (rotated A with pairwise-orthogonal
/// columns, accumulated right rotations V).
fn jacobi_orthogonalize(mut a: Matrix) -> (Matrix, Matrix) {
    let n = a.cols();
    let mut v = Matrix::identity(n);
    if n < 2 {
        return (a, v);
    }
    for _ in 0..JACOBI_SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = a.dot_cols(p, p);
                let beta = a.dot_cols(q, q);
                let gamma = a.dot_cols(p, q);
                if gamma.abs() <= JACOBI_SVD_TOL * (alpha * beta).sqrt() || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut a, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    (a, v)
}

#[inline]
fn rotate_columns(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.rows() {
        let mp = m.get(i, p);
        let mq = m.get(i, q);
        m.set(i, p, c * mp - s * mq);
        m.set(i, q, s * mp + c * mq);
    }
}

/// Fills the unset columns of `u` (those not listed in `filled`) with a
/// deterministic orthonormal completion drawn from coordinate vectors.
fn complete_orthonormal_columns(u: &mut Matrix, filled: &mut Vec<usize>) {
    let d = u.rows();
    let n = u.cols();
    if filled.len() == n {
        return;
    }
    let mut candidate = 0usize;
    for j in 0..n {
        if filled.contains(&j) {
            continue;
        }
        loop {
            assert!(candidate < d, "exhausted completion candidates");
            let mut col = vec![0.0; d];
            col[candidate] = 1.0;
            candidate += 1;
            // Two Gram-Schmidt passes against everything placed so far.
            for _ in 0..2 {
                for &f in filled.iter() {
                    let dot: f64 = (0..d).map(|i| col[i] * u.get(i, f)).sum();
                    for i in 0..d {
                        col[i] -= dot * u.get(i, f);
                    }
                }
            }
            let norm: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                for i in 0..d {
                    u.set(i, j, col[i] / norm);
                }
                filled.push(j);
                break;
            }
        }
    }
}

/// Symmetric eigendecomposition via cyclic Jacobi rotations. Converged when
/// the off-diagonal Frobenius norm drops below `1e-12` times the diagonal
/// norm. Within a degenerate eigenvalue cluster the returned basis is an
/// arbitrary orthonormal basis of that eigenspace; downstream contracts are
/// stated at the projector level for exactly this reason.
pub fn sym_eig(g: &Matrix) -> Result<EigResult, MatrixError> {
    g.check_finite()?;
    let n = g.rows();
    if g.cols() != n {
        return Err(MatrixError::DimensionMismatch {
            op: "sym_eig",
            left_rows: g.rows(),
            left_cols: g.cols(),
            right_rows: g.cols(),
            right_cols: g.cols(),
        });
    }
    let norm = g.frobenius_norm();
    let asym = g.sub(&g.transpose()).frobenius_norm();
    if norm > 0.0 && asym > 1e-10 * norm {
        return Err(MatrixError::NotSymmetric { asymmetry: asym / norm });
    }

    // Symmetrize exactly so roundoff asymmetry cannot bias the sweeps.
    let mut a = g.add(&g.transpose()).scale(0.5);
    let mut vec = Matrix::identity(n);

    for _ in 0..JACOBI_EIG_MAX_SWEEPS {
        let mut off = 0.0f64;
        let mut diag = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let x = a.get(i, j);
                if i == j {
                    diag += x * x;
                } else {
                    off += x * x;
                }
            }
        }
        if off.sqrt() <= JACOBI_EIG_OFF_TOL * diag.sqrt() {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;

                // A ← JᵀAJ on rows/columns p, q.
                for i in 0..n {
                    let aip = a.get(i, p);
                    let aiq = a.get(i, q);
                    a.set(i, p, c * aip - s * aiq);
                    a.set(i, q, s * aip + c * aiq);
                }
                for j in 0..n {
                    let apj = a.get(p, j);
                    let aqj = a.get(q, j);
                    a.set(p, j, c * apj - s * aqj);
                    a.set(q, j, s * apj + c * aqj);
                }
                rotate_columns(&mut vec, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap().then(i.cmp(&j)));
    let values: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let vectors = vec.select_columns(&order);
    Ok(EigResult { values, vectors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::numerical_rank;
    use crate::rng::{derive_rng, gaussian_matrix};

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn qr_orthogonal_columns_input() {
        // Already-orthogonal columns: basis comes out axis-aligned.
        let b = Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 0.0], &[0.0, 3.0]]);
        let qr = reduced_qr(&b, 1e-10).unwrap();
        assert_eq!(qr.rank, 2);
        let expected_q = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0], &[0.0, 1.0]]);
        let expected_t = Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 3.0]]);
        assert!(qr.q.sub(&expected_q).max_abs() < 1e-12);
        assert!(qr.r_upper.sub(&expected_t).max_abs() < 1e-12);
    }

    #[test]
    fn qr_identity() {
        let qr = reduced_qr(&Matrix::identity(3), 1e-10).unwrap();
        assert_eq!(qr.rank, 3);
        assert!(qr.q.sub(&Matrix::identity(3)).max_abs() < 1e-14);
        assert!(qr.r_upper.sub(&Matrix::identity(3)).max_abs() < 1e-14);
    }

    #[test]
    fn qr_rank_one_duplicated_column() {
        let b = Matrix::from_rows(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        let qr = reduced_qr(&b, 1e-10).unwrap();
        assert_eq!(qr.rank, 1);
        let s = 1.0 / 3.0f64.sqrt();
        for i in 0..3 {
            assert_close(qr.q.get(i, 0), s, 1e-12);
        }
        let rec = qr.q.matmul(&qr.r_upper);
        assert!(rec.sub(&b).frobenius_norm() < 1e-12);
        assert!(qr.q.orthonormality_defect() < 1e-12);
    }

    #[test]
    fn qr_zero_matrix_flagged() {
        let qr = reduced_qr(&Matrix::zeros(3, 2), 1e-10).unwrap();
        assert!(qr.is_rank_zero());
        assert_eq!(qr.q.cols(), 0);
        assert_eq!(qr.r_upper.rows(), 0);
    }

    #[test]
    fn qr_nonfinite_rejected() {
        let b = Matrix { rows: 1, cols: 1, data: vec![f64::INFINITY] };
        assert!(matches!(reduced_qr(&b, 1e-10), Err(MatrixError::NonFiniteInput { .. })));
    }

    #[test]
    fn qr_reconstruction_random_shapes() {
        let mut rng = derive_rng(5, &[3]);
        for &(d, n) in &[(6usize, 4usize), (4, 6), (9, 9), (16, 4)] {
            let b = gaussian_matrix(&mut rng, d, n, 1.0);
            let qr = reduced_qr(&b, 1e-10).unwrap();
            assert_eq!(qr.rank, d.min(n));
            let rec = qr.q.matmul(&qr.r_upper);
            assert!(rec.rel_frobenius_distance(&b) < 1e-12, "shape {d}x{n}");
            assert!(qr.q.orthonormality_defect() < 1e-12);
            // Pivot convention: nonnegative diagonal.
            for i in 0..qr.rank.min(n) {
                assert!(qr.r_upper.get(i, i) >= 0.0 || qr.r_upper.get(i, i).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn qr_dropped_column_keeps_in_span_coordinates() {
        // Third column is a combination of the first two.
        let mut rng = derive_rng(6, &[4]);
        let base = gaussian_matrix(&mut rng, 8, 2, 1.0);
        let combo = Matrix::from_fn(8, 1, |i, _| 0.5 * base.get(i, 0) - 2.0 * base.get(i, 1));
        let b = base.hstack(&combo);
        let qr = reduced_qr(&b, 1e-9).unwrap();
        assert_eq!(qr.rank, 2);
        let rec = qr.q.matmul(&qr.r_upper);
        assert!(rec.rel_frobenius_distance(&b) < 1e-12);
    }

    #[test]
    fn qr_deterministic_bits() {
        let mut rng = derive_rng(7, &[5]);
        let b = gaussian_matrix(&mut rng, 12, 5, 1.0);
        let first = reduced_qr(&b, 1e-10).unwrap();
        let second = reduced_qr(&b, 1e-10).unwrap();
        assert_eq!(first.q.data(), second.q.data());
        assert_eq!(first.r_upper.data(), second.r_upper.data());
    }

    #[test]
    fn svd_diagonal() {
        let m = Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]);
        let svd = thin_svd(&m).unwrap();
        assert_close(svd.sigma[0], 3.0, 1e-14);
        assert_close(svd.sigma[1], 1.0, 1e-14);
        assert!(svd.reconstruct().sub(&m).max_abs() < 1e-13);
    }

    #[test]
    fn svd_zero_matrix() {
        let svd = thin_svd(&Matrix::zeros(2, 2)).unwrap();
        assert_eq!(svd.sigma, vec![0.0, 0.0]);
        assert!(svd.u.orthonormality_defect() < 1e-14);
        assert!(svd.v.orthonormality_defect() < 1e-14);
    }

    #[test]
    fn svd_reconstruction_seeded() {
        let mut rng = derive_rng(9, &[7]);
        let m = gaussian_matrix(&mut rng, 5, 3, 1.0);
        let svd = thin_svd(&m).unwrap();
        assert!(svd.reconstruct().rel_frobenius_distance(&m) < 1e-12);
        assert!(svd.u.orthonormality_defect() < 1e-12);
        assert!(svd.v.orthonormality_defect() < 1e-12);
        for w in svd.sigma.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn svd_wide_and_rank_deficient() {
        let mut rng = derive_rng(10, &[8]);
        let left = gaussian_matrix(&mut rng, 4, 2, 1.0);
        let right = gaussian_matrix(&mut rng, 2, 7, 1.0);
        let m = left.matmul(&right); // 4x7, rank 2
        let svd = thin_svd(&m).unwrap();
        assert!(svd.reconstruct().rel_frobenius_distance(&m) < 1e-12);
        assert!(svd.u.orthonormality_defect() < 1e-11);
        assert!(svd.v.orthonormality_defect() < 1e-11);
        assert!(svd.sigma[2] < 1e-12 * svd.sigma[0]);
    }

    #[test]
    fn svd_sign_convention() {
        let mut rng = derive_rng(11, &[9]);
        let m = gaussian_matrix(&mut rng, 6, 4, 1.0);
        let svd = thin_svd(&m).unwrap();
        for j in 0..svd.u.cols() {
            let lead = (0..svd.u.rows()).map(|i| svd.u.get(i, j)).find(|x| *x != 0.0).unwrap();
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn eig_diagonal_and_identity() {
        let g = Matrix::from_rows(&[&[0.5, 0.0, 0.0], &[0.0, 0.5, 0.0], &[0.0, 0.0, 0.0]]);
        let eig = sym_eig(&g).unwrap();
        assert_close(eig.values[0], 0.5, 1e-14);
        assert_close(eig.values[1], 0.5, 1e-14);
        assert_close(eig.values[2], 0.0, 1e-14);
        // Degenerate cluster: check the top-2 projector, not the vectors.
        let top = eig.vectors.select_columns(&[0, 1]);
        let proj = top.matmul(&top.transpose());
        let expected =
            Matrix::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 0.0]]);
        assert!(proj.sub(&expected).max_abs() < 1e-12);

        let eig_id = sym_eig(&Matrix::identity(4)).unwrap();
        assert_eq!(eig_id.values, vec![1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn eig_matches_singular_values_squared() {
        let mut rng = derive_rng(13, &[11]);
        let m = gaussian_matrix(&mut rng, 6, 4, 1.0);
        let g = m.gram(); // MᵀM, 4x4
        let eig = sym_eig(&g).unwrap();
        let svd = thin_svd(&m).unwrap();
        for j in 0..4 {
            let expect = svd.sigma[j] * svd.sigma[j];
            assert!(
                (eig.values[j] - expect).abs() <= 1e-9 * expect.max(1.0),
                "eigenvalue {j}: {} vs {}",
                eig.values[j],
                expect
            );
        }
        // Residual check per column.
        for j in 0..4 {
            let v = eig.vectors.select_columns(&[j]);
            let gv = g.matmul(&v);
            let lv = v.scale(eig.values[j]);
            assert!(gv.sub(&lv).frobenius_norm() < 1e-8 * g.frobenius_norm().max(1.0));
        }
        assert!(eig.vectors.orthonormality_defect() < 1e-11);
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let g = Matrix::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert!(matches!(sym_eig(&g), Err(MatrixError::NotSymmetric { .. })));
    }

    #[test]
    fn eig_handles_zero_diagonal() {
        let g = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let eig = sym_eig(&g).unwrap();
        assert_close(eig.values[0], 1.0, 1e-12);
        assert_close(eig.values[1], -1.0, 1e-12);
    }

    #[test]
    fn kernels_agree_on_rank() {
        let mut rng = derive_rng(14, &[12]);
        let left = gaussian_matrix(&mut rng, 10, 3, 1.0);
        let right = gaussian_matrix(&mut rng, 3, 6, 1.0);
        let m = left.matmul(&right);
        let qr = reduced_qr(&m, 1e-9).unwrap();
        assert_eq!(qr.rank, 3);
        assert_eq!(numerical_rank(&m, 1e-9).unwrap(), 3);
    }
}
