//! Gauge fixing of raw LoRA factors into subspace–coordinate form, gauge
//! transformations for adversarial testing, and the worst-case aggregation
//! inconsistency metric.
//!
//! A factor pair `(B, A)` and its reparameterization `(B·Q, Q⁻¹·A)` induce
//! the same update `ΔW = B·A`. Gauge fixing maps every member of that
//! equivalence class to an orthonormal basis `U` of `col(B)` plus
//! coordinates `Â`, so that downstream aggregation only ever sees
//! representation-free objects.

use crate::baselines::{AggregationRule, RuleError};
use crate::matrix::{numerical_rank, reduced_qr, Matrix, MatrixError, DEFAULT_RANK_TOL};
use crate::rng::{derive_rng, gaussian_matrix, mix, random_orthonormal, stream};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaugeError {
    #[error("factor B is numerically zero; client contributes nothing this round")]
    ZeroUpdate,
    #[error("gauge matrix is numerically singular (rank {rank} of {expected})")]
    SingularGauge { rank: usize, expected: usize },
    #[error("factor shapes are inconsistent: B is {b_rows}x{b_cols}, A is {a_rows}x{a_cols}")]
    FactorShapeMismatch { b_rows: usize, b_cols: usize, a_rows: usize, a_cols: usize },
    #[error("gauge matrix must be {expected}x{expected}, got {rows}x{cols}")]
    GaugeShapeMismatch { expected: usize, rows: usize, cols: usize },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// Raw LoRA factorization `ΔW = b · a` for one layer of one client.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    /// Left factor, `d_out × r`.
    pub b: Matrix,
    /// Right factor, `r × d_in`.
    pub a: Matrix,
    pub layer_id: u32,
}

impl FactorPair {
    pub fn new(b: Matrix, a: Matrix, layer_id: u32) -> Result<Self, GaugeError> {
        if b.cols() != a.rows() || b.cols() == 0 {
            return Err(GaugeError::FactorShapeMismatch {
                b_rows: b.rows(),
                b_cols: b.cols(),
                a_rows: a.rows(),
                a_cols: a.cols(),
            });
        }
        Ok(Self { b, a, layer_id })
    }

    /// Inner rank of the factorization.
    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    /// Dense induced update `b · a`; for tests and metrics only.
    pub fn product(&self) -> Matrix {
        self.b.matmul(&self.a)
    }
}

/// Gauge-invariant wire object: orthonormal subspace basis plus coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GaugeFixedUpdate {
    /// Orthonormal basis of the update column space, `d_out × k`.
    pub u: Matrix,
    /// Coordinates, `k × d_in`; `u · a_hat` equals the originating product.
    pub a_hat: Matrix,
    /// Effective rank `k` after dropping dependent columns of `B`.
    pub rank: usize,
}

impl GaugeFixedUpdate {
    /// Dense update `u · a_hat`; for tests and metrics only.
    pub fn product(&self) -> Matrix {
        self.u.matmul(&self.a_hat)
    }
}

/// Rewrites `B = U·T` by reduced QR and folds `T` into the coordinates,
/// `Â = T·A`. The result satisfies `U·Â = B·A` up to the dropped
/// below-tolerance residuals of rank-deficient inputs.
pub fn gauge_fix(fp: &FactorPair, rank_tol: f64) -> Result<GaugeFixedUpdate, GaugeError> {
    if fp.b.cols() != fp.a.rows() || fp.b.cols() == 0 {
        return Err(GaugeError::FactorShapeMismatch {
            b_rows: fp.b.rows(),
            b_cols: fp.b.cols(),
            a_rows: fp.a.rows(),
            a_cols: fp.a.cols(),
        });
    }
    fp.a.check_finite()?;
    let qr = reduced_qr(&fp.b, rank_tol)?;
    if qr.is_rank_zero() {
        return Err(GaugeError::ZeroUpdate);
    }
    let a_hat = qr.r_upper.matmul(&fp.a);
    Ok(GaugeFixedUpdate { u: qr.q, a_hat, rank: qr.rank })
}

/// Invertible `r × r` matrix with condition number at most `cond_max`,
/// deterministic in `seed`. Built as `U·diag(s)·Vᵀ` with random orthogonal
/// factors and log-uniform spectrum in `[1/√cond_max, √cond_max]`, so the
/// condition bound holds by construction.
pub fn random_gauge(r: usize, seed: u64, cond_max: f64) -> Matrix {
    assert!(r >= 1, "gauge rank must be at least 1");
    assert!(cond_max >= 1.0, "cond_max must be at least 1");
    let mut rng = derive_rng(seed, &[stream::GAUGE]);
    let u = random_orthonormal(&mut rng, r, r);
    let v = random_orthonormal(&mut rng, r, r);
    let half_log = 0.5 * cond_max.ln();
    let mut scaled = u;
    for j in 0..r {
        let x: f64 = rng.gen_range(-1.0..=1.0);
        let s = (x * half_log).exp();
        scaled.scale_column(j, s);
    }
    scaled.matmul(&v.transpose())
}

/// Applies a gauge transformation: `(B, A) → (B·Q, Q⁻¹·A)`. The inverse is
/// applied through a QR solve rather than an explicit inverse.
pub fn apply_gauge(fp: &FactorPair, q: &Matrix) -> Result<FactorPair, GaugeError> {
    let r = fp.rank();
    if q.rows() != r || q.cols() != r {
        return Err(GaugeError::GaugeShapeMismatch { expected: r, rows: q.rows(), cols: q.cols() });
    }
    let detected = numerical_rank(q, DEFAULT_RANK_TOL)?;
    if detected != r {
        return Err(GaugeError::SingularGauge { rank: detected, expected: r });
    }
    let b = fp.b.matmul(q);
    let a = solve_square(q, &fp.a)?;
    Ok(FactorPair { b, a, layer_id: fp.layer_id })
}

/// Solves `q · x = rhs` for square full-rank `q` via QR and back substitution.
fn solve_square(q: &Matrix, rhs: &Matrix) -> Result<Matrix, GaugeError> {
    let r = q.rows();
    let qr = reduced_qr(q, DEFAULT_RANK_TOL)?;
    if qr.rank != r {
        return Err(GaugeError::SingularGauge { rank: qr.rank, expected: r });
    }
    // x = R⁻¹ · (Qᵀ · rhs)
    let c = qr.q.matmul_transpose_self(rhs);
    let mut x = c;
    for i in (0..r).rev() {
        let pivot = qr.r_upper.get(i, i);
        for col in 0..x.cols() {
            let mut acc = x.get(i, col);
            for j in i + 1..r {
                acc -= qr.r_upper.get(i, j) * x.get(j, col);
            }
            x.set(i, col, acc / pivot);
        }
    }
    Ok(x)
}

const INCONSISTENCY_FLOOR: f64 = 1e-15;

/// Relative change of the rule's materialized global update when each
/// submission is replaced by the given gauge-equivalent reparameterization.
pub fn inconsistency_under_gauges(
    rule: &AggregationRule,
    submissions: &[(f64, FactorPair)],
    gauges: &[Matrix],
) -> Result<f64, RuleError> {
    assert_eq!(submissions.len(), gauges.len(), "one gauge per submission");
    let base = rule.global_update(submissions)?;
    let mut gauged = Vec::with_capacity(submissions.len());
    for ((w, fp), q) in submissions.iter().zip(gauges) {
        gauged.push((*w, apply_gauge(fp, q)?));
    }
    let shifted = rule.global_update(&gauged)?;
    let denom = base.frobenius_norm().max(INCONSISTENCY_FLOOR);
    Ok(shifted.sub(&base).frobenius_norm() / denom)
}

/// Worst-case aggregation inconsistency over `n_trials` independent random
/// gauge attacks with condition number at most `cond_max`. A gauge-invariant
/// rule scores at numerical noise; factor-averaging rules do not.
///
/// The maximum (not the mean) is reported: invariance is a universally
/// quantified property, so a single bad trial is a failure.
pub fn aggregation_inconsistency(
    rule: &AggregationRule,
    submissions: &[(f64, FactorPair)],
    n_trials: usize,
    cond_max: f64,
    seed: u64,
) -> Result<f64, RuleError> {
    assert!(n_trials >= 1, "need at least one trial");
    validate_weights(submissions)?;
    let mut worst = 0.0f64;
    for trial in 0..n_trials as u64 {
        let gauges: Vec<Matrix> = submissions
            .iter()
            .enumerate()
            .map(|(i, (_, fp))| {
                random_gauge(fp.rank(), mix(seed, &[stream::INCONSISTENCY, trial, i as u64]), cond_max)
            })
            .collect();
        let value = inconsistency_under_gauges(rule, submissions, &gauges)?;
        worst = worst.max(value);
    }
    Ok(worst)
}

pub(crate) fn validate_weights(submissions: &[(f64, FactorPair)]) -> Result<(), RuleError> {
    if submissions.is_empty() {
        return Err(RuleError::EmptyRound);
    }
    let mut total = 0.0;
    for (w, _) in submissions {
        if *w < 0.0 || !w.is_finite() {
            return Err(RuleError::InvalidWeights { sum: *w });
        }
        total += *w;
    }
    if (total - 1.0).abs() > 1e-12 {
        return Err(RuleError::InvalidWeights { sum: total });
    }
    Ok(())
}

/// Deterministic random factor pair for tests and stimuli.
pub fn random_factor_pair(
    seed: u64,
    d_out: usize,
    rank: usize,
    d_in: usize,
    layer_id: u32,
) -> FactorPair {
    let mut rng = derive_rng(seed, &[stream::GAUGE, 777]);
    let b = gaussian_matrix(&mut rng, d_out, rank, 1.0);
    let a = gaussian_matrix(&mut rng, rank, d_in, 1.0);
    FactorPair { b, a, layer_id }
}
