//! Server-side aggregation in a shared consensus frame.
//!
//! The server state is `(U_ref, Z_g)`: an orthonormal reference basis for
//! the rank-`R` consensus subspace of the weighted client projectors, and
//! the aggregated coordinates of the client updates in that basis. The
//! induced server update `U_ref · Z_g` equals the orthogonal projection of
//! the dense update average onto the consensus subspace, but is never
//! materialized here.
//!
//! The top eigenspace of `K = Σ pᵢ Uᵢ Uᵢᵀ` is obtained from the small Gram
//! matrix of the `d_out × r_Σ` concatenation `M = [√pᵢ Uᵢ]`: the aggregation
//! path allocates nothing of size `d_out × d_out`.

use crate::gauge::GaugeFixedUpdate;
use crate::matrix::{sym_eig, Matrix, MatrixError};
use crate::ClientId;
use thiserror::Error;

/// Eigenvalues below this fraction of the largest are unusable directions:
/// the basis column would be a quotient of noise.
const EIGENVALUE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregateError {
    #[error("round has no usable submissions")]
    EmptyRound,
    #[error("submission weights must be nonnegative and sum to 1 (sum = {sum})")]
    InvalidWeights { sum: f64 },
    #[error("row-dimension mismatch: reference basis has {expected} rows, update has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// One client's contribution to a round.
#[derive(Debug, Clone)]
pub struct Submission {
    pub client_id: ClientId,
    /// Aggregation weight `pᵢ`; weights over a round sum to 1.
    pub weight: f64,
    pub update: GaugeFixedUpdate,
}

/// Server rank budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BudgetPolicy {
    /// `R = ceil(ratio · Σ kᵢ)`, clamped to `[1, min(d_out, Σ kᵢ)]`.
    Ratio(f64),
    /// Explicit `R`, clamped the same way.
    Fixed(usize),
}

impl Default for BudgetPolicy {
    fn default() -> Self {
        // Full budget reproduces the dense update average exactly.
        BudgetPolicy::Ratio(1.0)
    }
}

impl BudgetPolicy {
    pub fn effective_rank(&self, total_rank: usize, d_out: usize) -> usize {
        let cap = total_rank.min(d_out).max(1);
        match *self {
            BudgetPolicy::Ratio(rho) => {
                assert!(rho > 0.0 && rho <= 1.0, "budget ratio must be in (0, 1]");
                let raw = (rho * total_rank as f64).ceil() as usize;
                raw.clamp(1, cap)
            }
            BudgetPolicy::Fixed(r) => r.clamp(1, cap),
        }
    }
}

/// Aggregated server state `Ω = (U_ref, Z_g)` for one layer.
#[derive(Debug, Clone)]
pub struct ServerState {
    /// Consensus basis, `d_out × R`, orthonormal columns.
    pub u_ref: Matrix,
    /// Aggregated coordinates, `R × d_in`.
    pub z_g: Matrix,
    pub round: u64,
}

impl ServerState {
    pub fn budget_rank(&self) -> usize {
        self.u_ref.cols()
    }
}

fn validate_submissions(submissions: &[Submission]) -> Result<(), AggregateError> {
    if submissions.is_empty() {
        return Err(AggregateError::EmptyRound);
    }
    let mut sum = 0.0;
    for s in submissions {
        if s.weight < 0.0 || !s.weight.is_finite() {
            return Err(AggregateError::InvalidWeights { sum: s.weight });
        }
        sum += s.weight;
    }
    if (sum - 1.0).abs() > 1e-12 {
        return Err(AggregateError::InvalidWeights { sum });
    }
    Ok(())
}

/// Indices of `submissions` in ascending `client_id` order: all weighted
/// reductions run in this order so schedules cannot perturb results.
fn canonical_order(submissions: &[Submission]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..submissions.len()).collect();
    idx.sort_by_key(|&i| (submissions[i].client_id, i));
    idx
}

/// Horizontal concatenation `M = [√pᵢ · Uᵢ]` in ascending client order.
/// `M·Mᵀ` equals the weighted projector sum without ever forming it.
pub fn build_weighted_basis(submissions: &[Submission]) -> Result<Matrix, AggregateError> {
    validate_submissions(submissions)?;
    let order = canonical_order(submissions);
    let d_out = submissions[order[0]].update.u.rows();
    let total: usize = submissions.iter().map(|s| s.update.rank).sum();
    let mut m = Matrix::zeros(d_out, total);
    let mut col = 0;
    for &i in &order {
        let s = &submissions[i];
        if s.update.u.rows() != d_out {
            return Err(AggregateError::DimensionMismatch {
                expected: d_out,
                got: s.update.u.rows(),
            });
        }
        let w = s.weight.sqrt();
        for j in 0..s.update.rank {
            for r in 0..d_out {
                m.set(r, col, w * s.update.u.get(r, j));
            }
            col += 1;
        }
    }
    Ok(m)
}

/// Orthonormal basis of the top-`R` eigenspace of `M·Mᵀ`, computed from the
/// `r_Σ × r_Σ` Gram matrix `G = MᵀM`: for each retained eigenpair
/// `(λ, w)` of `G`, the corresponding basis column is `M·w / √λ`.
/// Directions with `λ ≤ 1e-12·λ_max` are dropped, shrinking `R` if needed.
pub fn consensus_basis(m: &Matrix, budget: BudgetPolicy) -> Result<Matrix, AggregateError> {
    if m.cols() == 0 {
        return Err(AggregateError::EmptyRound);
    }
    let d_out = m.rows();
    let r_sigma = m.cols();
    let target = budget.effective_rank(r_sigma, d_out);

    let gram = m.gram();
    let eig = sym_eig(&gram)?;
    let lambda_max = eig.values.first().copied().unwrap_or(0.0).max(0.0);
    if lambda_max <= 0.0 {
        return Err(AggregateError::EmptyRound);
    }
    let usable = eig
        .values
        .iter()
        .filter(|&&l| l > EIGENVALUE_FLOOR * lambda_max)
        .count();
    let r_eff = target.min(usable).max(1);

    let mut u_ref = Matrix::zeros(d_out, r_eff);
    for j in 0..r_eff {
        let lambda = eig.values[j];
        let scale = 1.0 / lambda.sqrt();
        let w = eig.vectors.select_columns(&[j]);
        let col = m.matmul(&w);
        for i in 0..d_out {
            u_ref.set(i, j, scale * col.get(i, 0));
        }
    }

    // One modified Gram-Schmidt pass absorbs eigensolver roundoff on small
    // eigenvalues; in exact arithmetic it is the identity.
    for j in 0..r_eff {
        for prev in 0..j {
            let dot: f64 = (0..d_out).map(|i| u_ref.get(i, j) * u_ref.get(i, prev)).sum();
            for i in 0..d_out {
                let val = u_ref.get(i, j) - dot * u_ref.get(i, prev);
                u_ref.set(i, j, val);
            }
        }
        let norm: f64 = (0..d_out).map(|i| u_ref.get(i, j).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for i in 0..d_out {
                let val = u_ref.get(i, j) / norm;
                u_ref.set(i, j, val);
            }
        }
    }
    Ok(u_ref)
}

/// Client coordinates in the reference frame:
/// `Zᵢ = (U_refᵀ·Uᵢ)·Âᵢ = U_refᵀ·ΔWᵢ`, computed thin-first.
pub fn project_coordinates(
    u_ref: &Matrix,
    upd: &GaugeFixedUpdate,
) -> Result<Matrix, AggregateError> {
    if u_ref.rows() != upd.u.rows() {
        return Err(AggregateError::DimensionMismatch {
            expected: u_ref.rows(),
            got: upd.u.rows(),
        });
    }
    let overlap = u_ref.matmul_transpose_self(&upd.u); // R × kᵢ
    Ok(overlap.matmul(&upd.a_hat)) // R × d_in
}

/// Full projected aggregation: consensus basis from the weighted
/// concatenated bases, then `Z_g = Σ pᵢ Zᵢ` in ascending client order.
pub fn aggregate(
    submissions: &[Submission],
    budget: BudgetPolicy,
) -> Result<ServerState, AggregateError> {
    validate_submissions(submissions)?;
    let m = build_weighted_basis(submissions)?;
    let u_ref = consensus_basis(&m, budget)?;
    let order = canonical_order(submissions);

    let d_in = submissions[order[0]].update.a_hat.cols();
    let mut z_g = Matrix::zeros(u_ref.cols(), d_in);
    for &i in &order {
        let s = &submissions[i];
        let z_i = project_coordinates(&u_ref, &s.update)?;
        if z_i.cols() != d_in {
            return Err(AggregateError::DimensionMismatch { expected: d_in, got: z_i.cols() });
        }
        z_g.add_assign_scaled(&z_i, s.weight);
    }
    Ok(ServerState { u_ref, z_g, round: 0 })
}

/// Dense server update `U_ref · Z_g`. Metrics and tests only: the
/// aggregation path never calls this.
pub fn materialize(state: &ServerState) -> Matrix {
    state.u_ref.matmul(&state.z_g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauge::{gauge_fix, random_factor_pair};
    use crate::rng::{derive_rng, random_orthonormal};

    fn unit_column(d: usize, idx: usize) -> Matrix {
        Matrix::from_fn(d, 1, |i, _| if i == idx { 1.0 } else { 0.0 })
    }

    fn submission(id: ClientId, weight: f64, u: Matrix, a_hat: Matrix) -> Submission {
        let rank = u.cols();
        Submission { client_id: id, weight, update: GaugeFixedUpdate { u, a_hat, rank } }
    }

    /// Random submissions with orthonormal bases; weights normalized.
    fn seeded_submissions(seed: u64, d_out: usize, d_in: usize, ranks: &[usize]) -> Vec<Submission> {
        let mut rng = derive_rng(seed, &[99]);
        let n = ranks.len();
        ranks
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let u = random_orthonormal(&mut rng, d_out, r);
                let a_hat = crate::rng::gaussian_matrix(&mut rng, r, d_in, 1.0);
                submission(i as ClientId, 1.0 / n as f64, u, a_hat)
            })
            .collect()
    }

    fn dense_average(submissions: &[Submission]) -> Matrix {
        let d_out = submissions[0].update.u.rows();
        let d_in = submissions[0].update.a_hat.cols();
        let mut acc = Matrix::zeros(d_out, d_in);
        for s in submissions {
            acc.add_assign_scaled(&s.update.product(), s.weight);
        }
        acc
    }

    #[test]
    fn weighted_basis_single_client() {
        let subs = vec![submission(0, 1.0, unit_column(3, 0), Matrix::zeros(1, 2))];
        let m = build_weighted_basis(&subs).unwrap();
        assert!(m.sub(&unit_column(3, 0)).max_abs() < 1e-15);
    }

    #[test]
    fn weighted_basis_two_clients_hand() {
        let subs = vec![
            submission(0, 0.25, unit_column(3, 0), Matrix::zeros(1, 2)),
            submission(1, 0.75, unit_column(3, 1), Matrix::zeros(1, 2)),
        ];
        let m = build_weighted_basis(&subs).unwrap();
        assert!((m.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((m.get(1, 1) - 0.75f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn weighted_basis_gram_equals_projector_sum() {
        let subs = seeded_submissions(4, 12, 6, &[2, 3, 1]);
        let m = build_weighted_basis(&subs).unwrap();
        let mmt = m.matmul(&m.transpose());
        let mut k = Matrix::zeros(12, 12);
        for s in &subs {
            let p = s.update.u.matmul(&s.update.u.transpose());
            k.add_assign_scaled(&p, s.weight);
        }
        assert!(mmt.sub(&k).frobenius_norm() < 1e-12);
    }

    #[test]
    fn consensus_basis_single_direction() {
        let subs = vec![submission(0, 1.0, unit_column(3, 0), Matrix::zeros(1, 2))];
        let m = build_weighted_basis(&subs).unwrap();
        let u_ref = consensus_basis(&m, BudgetPolicy::Fixed(1)).unwrap();
        let proj = u_ref.matmul(&u_ref.transpose());
        let expected = unit_column(3, 0).matmul(&unit_column(3, 0).transpose());
        assert!(proj.sub(&expected).max_abs() < 1e-12);
    }

    #[test]
    fn consensus_basis_degenerate_pair_projector() {
        let subs = vec![
            submission(0, 0.5, unit_column(3, 0), Matrix::zeros(1, 2)),
            submission(1, 0.5, unit_column(3, 1), Matrix::zeros(1, 2)),
        ];
        let m = build_weighted_basis(&subs).unwrap();
        let u_ref = consensus_basis(&m, BudgetPolicy::Fixed(2)).unwrap();
        let proj = u_ref.matmul(&u_ref.transpose());
        let mut expected = Matrix::zeros(3, 3);
        expected.set(0, 0, 1.0);
        expected.set(1, 1, 1.0);
        assert!(proj.sub(&expected).max_abs() < 1e-10);
    }

    #[test]
    fn consensus_basis_matches_dense_eigendecomposition() {
        let subs = seeded_submissions(8, 32, 4, &[2, 2, 2]);
        let m = build_weighted_basis(&subs).unwrap();
        let budget = BudgetPolicy::Fixed(4);
        let u_ref = consensus_basis(&m, budget).unwrap();
        assert_eq!(u_ref.cols(), 4);
        assert!(u_ref.orthonormality_defect() < 1e-10);

        // Dense oracle: eigendecompose the full 32×32 projector sum.
        let k = m.matmul(&m.transpose());
        let eig = sym_eig(&k).unwrap();
        let gap = eig.values[3] - eig.values[4];
        assert!(gap > 1e-6, "test stimulus must have an eigengap, got {gap}");
        let dense_top = eig.vectors.select_columns(&[0, 1, 2, 3]);
        let dense_proj = dense_top.matmul(&dense_top.transpose());
        let thin_proj = u_ref.matmul(&u_ref.transpose());
        assert!(thin_proj.sub(&dense_proj).frobenius_norm() < 1e-8);
    }

    #[test]
    fn project_contained_subspace_reconstructs() {
        let subs = seeded_submissions(15, 16, 5, &[3]);
        let m = build_weighted_basis(&subs).unwrap();
        let u_ref = consensus_basis(&m, BudgetPolicy::Ratio(1.0)).unwrap();
        let z = project_coordinates(&u_ref, &subs[0].update).unwrap();
        let rec = u_ref.matmul(&z);
        assert!(rec.rel_frobenius_distance(&subs[0].update.product()) < 1e-10);
    }

    #[test]
    fn project_orthogonal_subspace_is_zero() {
        let u_ref = unit_column(4, 0);
        let upd = GaugeFixedUpdate { u: unit_column(4, 2), a_hat: Matrix::identity(1), rank: 1 };
        let z = project_coordinates(&u_ref, &upd).unwrap();
        assert!(z.max_abs() < 1e-12);
    }

    #[test]
    fn project_matches_dense_projection_oracle() {
        let subs = seeded_submissions(16, 20, 7, &[2, 3]);
        let m = build_weighted_basis(&subs).unwrap();
        let u_ref = consensus_basis(&m, BudgetPolicy::Fixed(3)).unwrap();
        for s in &subs {
            let z = project_coordinates(&u_ref, &s.update).unwrap();
            let lhs = u_ref.matmul(&z);
            let proj = u_ref.matmul(&u_ref.transpose());
            let rhs = proj.matmul(&s.update.product());
            assert!(lhs.sub(&rhs).frobenius_norm() < 1e-10 * rhs.frobenius_norm().max(1.0));
        }
    }

    #[test]
    fn aggregate_single_client_full_budget_exact() {
        let subs = seeded_submissions(23, 16, 6, &[4]);
        let state = aggregate(&subs, BudgetPolicy::Ratio(1.0)).unwrap();
        assert!(materialize(&state).rel_frobenius_distance(&subs[0].update.product()) < 1e-10);
    }

    #[test]
    fn aggregate_full_budget_recovers_dense_average() {
        let subs = seeded_submissions(24, 24, 9, &[2, 4, 3]);
        let state = aggregate(&subs, BudgetPolicy::Ratio(1.0)).unwrap();
        let oracle = dense_average(&subs);
        assert!(materialize(&state).rel_frobenius_distance(&oracle) < 1e-9);
    }

    #[test]
    fn aggregate_rank_one_shared_subspace_hand() {
        let a1 = Matrix::from_rows(&[&[1.0, 2.0]]);
        let a2 = Matrix::from_rows(&[&[3.0, -1.0]]);
        let subs = vec![
            submission(0, 0.5, unit_column(3, 0), a1),
            submission(1, 0.5, unit_column(3, 0), a2),
        ];
        let state = aggregate(&subs, BudgetPolicy::Fixed(1)).unwrap();
        let got = materialize(&state);
        // e1 · (0.5·â₁ + 0.5·â₂)
        let expected = Matrix::from_rows(&[&[2.0, 0.5], &[0.0, 0.0], &[0.0, 0.0]]);
        assert!(got.sub(&expected).max_abs() < 1e-12);
    }

    #[test]
    fn aggregate_from_raw_factors_matches_oracle() {
        // End-to-end: raw pairs → gauge_fix → aggregate at full budget.
        let weights = [0.2, 0.3, 0.5];
        let mut subs = Vec::new();
        let mut oracle = Matrix::zeros(16, 8);
        for (i, &w) in weights.iter().enumerate() {
            let fp = random_factor_pair(40 + i as u64, 16, 2 + i, 8, 0);
            oracle.add_assign_scaled(&fp.product(), w);
            subs.push(Submission {
                client_id: i as ClientId,
                weight: w,
                update: gauge_fix(&fp, 1e-9).unwrap(),
            });
        }
        let state = aggregate(&subs, BudgetPolicy::Ratio(1.0)).unwrap();
        assert!(materialize(&state).rel_frobenius_distance(&oracle) < 1e-9);
    }

    #[test]
    fn materialize_zero_and_norm_identity() {
        let subs = seeded_submissions(30, 10, 4, &[2]);
        let mut state = aggregate(&subs, BudgetPolicy::Ratio(1.0)).unwrap();
        state.z_g = Matrix::zeros(state.z_g.rows(), state.z_g.cols());
        assert_eq!(materialize(&state).max_abs(), 0.0);

        let state2 = aggregate(&seeded_submissions(31, 10, 4, &[2, 1]), BudgetPolicy::Ratio(1.0))
            .unwrap();
        let diff = (materialize(&state2).frobenius_norm() - state2.z_g.frobenius_norm()).abs();
        assert!(diff < 1e-12 * state2.z_g.frobenius_norm().max(1.0));
    }

    #[test]
    fn empty_round_rejected() {
        assert!(matches!(aggregate(&[], BudgetPolicy::Ratio(1.0)), Err(AggregateError::EmptyRound)));
    }

    #[test]
    fn unnormalized_weights_rejected() {
        let mut subs = seeded_submissions(33, 8, 3, &[1, 1]);
        subs[0].weight = 0.7;
        subs[1].weight = 0.7;
        assert!(matches!(
            aggregate(&subs, BudgetPolicy::Ratio(1.0)),
            Err(AggregateError::InvalidWeights { .. })
        ));
    }

    #[test]
    fn permutation_invariance() {
        let subs = seeded_submissions(34, 18, 6, &[2, 3, 2, 1]);
        let state_a = aggregate(&subs, BudgetPolicy::Ratio(0.6)).unwrap();
        let mut shuffled = subs.clone();
        shuffled.swap(0, 3);
        shuffled.swap(1, 2);
        let state_b = aggregate(&shuffled, BudgetPolicy::Ratio(0.6)).unwrap();
        let a = materialize(&state_a);
        let b = materialize(&state_b);
        assert!(a.rel_frobenius_distance(&b) < 1e-9);
    }

    #[test]
    fn budget_policy_clamps() {
        assert_eq!(BudgetPolicy::Ratio(1.0).effective_rank(10, 64), 10);
        assert_eq!(BudgetPolicy::Ratio(0.5).effective_rank(10, 64), 5);
        assert_eq!(BudgetPolicy::Ratio(0.01).effective_rank(10, 64), 1);
        assert_eq!(BudgetPolicy::Ratio(1.0).effective_rank(100, 64), 64);
        assert_eq!(BudgetPolicy::Fixed(7).effective_rank(10, 64), 7);
        assert_eq!(BudgetPolicy::Fixed(0).effective_rank(10, 64), 1);
        assert_eq!(BudgetPolicy::Fixed(99).effective_rank(10, 64), 10);
    }
}
