//! Reference aggregation rules for comparison against the gauge-aware rule:
//! direct factor averaging (FedIT), zero-pad/truncate factor averaging
//! (HetLoRA), and dense update aggregation with SVD redistribution
//! (FlexLoRA).
//!
//! Each rule maps weighted raw factor pairs to per-client initializations
//! plus a materialized-on-demand global update used by metrics. The dense
//! rules exist both as baselines and as semantic ground truth: FlexLoRA's
//! dense average is what exact gauge-aware aggregation must reproduce.

use crate::consensus::{aggregate, materialize, AggregateError, BudgetPolicy, Submission};
use crate::gauge::{gauge_fix, FactorPair, GaugeError};
use crate::matrix::{thin_svd, Matrix, MatrixError, DEFAULT_RANK_TOL};
use crate::readout::{balanced_factorize, ClientProfile, ReadoutConfig, ReadoutError, SpectralState};
use crate::rng::{derive_rng, gaussian_matrix, stream};
use crate::ClientId;
use std::collections::BTreeMap;
use thiserror::Error;

/// Above this size the dense SVD in FlexLoRA switches from Jacobi to
/// deterministic subspace iteration; both paths are exact on the low-rank
/// inputs the redistribution consumes.
const DENSE_SVD_JACOBI_LIMIT: usize = 128;
const SUBSPACE_ITER_OVERSAMPLE: usize = 8;
const SUBSPACE_ITER_ROUNDS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuleError {
    #[error("round has no usable submissions")]
    EmptyRound,
    #[error("submission weights must be nonnegative and sum to 1 (sum = {sum})")]
    InvalidWeights { sum: f64 },
    #[error("factor averaging requires homogeneous ranks, got {first} and {other}")]
    HeterogeneousRanks { first: usize, other: usize },
    #[error("submissions disagree on layer shape: {a_rows}x{a_cols} vs {b_rows}x{b_cols}")]
    ShapeMismatch { a_rows: usize, a_cols: usize, b_rows: usize, b_cols: usize },
    #[error(transparent)]
    Gauge(#[from] GaugeError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Readout(#[from] ReadoutError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// Server aggregation rule and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum AggregationRule {
    /// Gauge-aware projected aggregation with client-aware readout.
    Glora { budget: BudgetPolicy, readout: ReadoutConfig },
    /// Direct factor averaging; homogeneous ranks only.
    FedIt,
    /// Zero-pad factors to the maximum rank, average, truncate per client.
    HetLora,
    /// Dense update average with balanced-SVD redistribution.
    FlexLora,
}

impl AggregationRule {
    pub fn glora_default() -> Self {
        AggregationRule::Glora {
            budget: BudgetPolicy::default(),
            readout: ReadoutConfig::default(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AggregationRule::Glora { .. } => "glora",
            AggregationRule::FedIt => "fedit",
            AggregationRule::HetLora => "hetlora",
            AggregationRule::FlexLora => "flexlora",
        }
    }

    /// Materialized global update for metrics and invariance probes.
    pub fn global_update(&self, pairs: &[(f64, FactorPair)]) -> Result<Matrix, RuleError> {
        match self {
            AggregationRule::Glora { budget, .. } => {
                let state = glora_server_state(pairs, *budget)?;
                Ok(materialize(&state))
            }
            AggregationRule::FedIt => {
                let avg = fedit_aggregate(pairs)?;
                Ok(avg.product())
            }
            AggregationRule::HetLora => {
                let avg = hetlora_padded_average(pairs)?;
                Ok(avg.product())
            }
            AggregationRule::FlexLora => dense_update_average(pairs),
        }
    }
}

fn check_common_shape(pairs: &[(f64, FactorPair)]) -> Result<(usize, usize), RuleError> {
    if pairs.is_empty() {
        return Err(RuleError::EmptyRound);
    }
    let d_out = pairs[0].1.b.rows();
    let d_in = pairs[0].1.a.cols();
    for (_, fp) in pairs {
        if fp.b.rows() != d_out || fp.a.cols() != d_in {
            return Err(RuleError::ShapeMismatch {
                a_rows: d_out,
                a_cols: d_in,
                b_rows: fp.b.rows(),
                b_cols: fp.a.cols(),
            });
        }
    }
    Ok((d_out, d_in))
}

/// Gauge-aware server state from raw factor pairs: gauge-fix every pair,
/// drop numerically-zero updates (renormalizing the remaining weights), and
/// run projected aggregation. Submission order follows the input order.
pub fn glora_server_state(
    pairs: &[(f64, FactorPair)],
    budget: BudgetPolicy,
) -> Result<crate::consensus::ServerState, RuleError> {
    check_common_shape(pairs)?;
    let mut kept: Vec<(usize, f64, crate::gauge::GaugeFixedUpdate)> = Vec::new();
    for (i, (w, fp)) in pairs.iter().enumerate() {
        match gauge_fix(fp, DEFAULT_RANK_TOL) {
            Ok(update) => kept.push((i, *w, update)),
            Err(GaugeError::ZeroUpdate) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    if kept.is_empty() {
        return Err(RuleError::EmptyRound);
    }
    let total: f64 = kept.iter().map(|(_, w, _)| *w).sum();
    if total <= 0.0 {
        return Err(RuleError::InvalidWeights { sum: total });
    }
    let submissions: Vec<Submission> = kept
        .into_iter()
        .map(|(i, w, update)| Submission {
            client_id: i as ClientId,
            weight: w / total,
            update,
        })
        .collect();
    Ok(aggregate(&submissions, budget)?)
}

/// FedIT: weighted average of homogeneous factors, broadcast to everyone.
pub fn fedit_aggregate(pairs: &[(f64, FactorPair)]) -> Result<FactorPair, RuleError> {
    let (d_out, d_in) = check_common_shape(pairs)?;
    let rank = pairs[0].1.rank();
    for (_, fp) in pairs {
        if fp.rank() != rank {
            return Err(RuleError::HeterogeneousRanks { first: rank, other: fp.rank() });
        }
    }
    let mut b = Matrix::zeros(d_out, rank);
    let mut a = Matrix::zeros(rank, d_in);
    for (w, fp) in pairs {
        b.add_assign_scaled(&fp.b, *w);
        a.add_assign_scaled(&fp.a, *w);
    }
    Ok(FactorPair { b, a, layer_id: pairs[0].1.layer_id })
}

/// HetLoRA's shared intermediate: zero-pad all factors to the maximum rank
/// and average them. The broadcast product is `B̄_pad · Ā_pad`.
pub fn hetlora_padded_average(pairs: &[(f64, FactorPair)]) -> Result<FactorPair, RuleError> {
    let (d_out, d_in) = check_common_shape(pairs)?;
    let r_max = pairs.iter().map(|(_, fp)| fp.rank()).max().unwrap_or(0);
    let mut b = Matrix::zeros(d_out, r_max);
    let mut a = Matrix::zeros(r_max, d_in);
    for (w, fp) in pairs {
        for i in 0..d_out {
            for j in 0..fp.rank() {
                let v = b.get(i, j) + w * fp.b.get(i, j);
                b.set(i, j, v);
            }
        }
        for i in 0..fp.rank() {
            for j in 0..d_in {
                let v = a.get(i, j) + w * fp.a.get(i, j);
                a.set(i, j, v);
            }
        }
    }
    Ok(FactorPair { b, a, layer_id: pairs[0].1.layer_id })
}

/// Truncation of a factor pair to the client's leading components, padded
/// back up with zero columns/rows if the client's rank exceeds the source.
pub(crate) fn truncate_pair(avg: &FactorPair, rank: usize) -> FactorPair {
    let keep = rank.min(avg.rank());
    let d_out = avg.b.rows();
    let d_in = avg.a.cols();
    let mut b = Matrix::zeros(d_out, rank);
    let mut a = Matrix::zeros(rank, d_in);
    for i in 0..d_out {
        for j in 0..keep {
            b.set(i, j, avg.b.get(i, j));
        }
    }
    for i in 0..keep {
        for j in 0..d_in {
            a.set(i, j, avg.a.get(i, j));
        }
    }
    FactorPair { b, a, layer_id: avg.layer_id }
}

/// HetLoRA: pad, average, then redistribute to each profile by truncation
/// to its leading `rᵢ` columns/rows.
pub fn hetlora_aggregate(
    pairs: &[(f64, FactorPair)],
    profiles: &[ClientProfile],
) -> Result<BTreeMap<ClientId, FactorPair>, RuleError> {
    let avg = hetlora_padded_average(pairs)?;
    let mut out = BTreeMap::new();
    for p in profiles {
        out.insert(p.client_id, truncate_pair(&avg, p.rank));
    }
    Ok(out)
}

/// Dense update average `Σ pᵢ Bᵢ Aᵢ`.
pub(crate) fn dense_update_average(pairs: &[(f64, FactorPair)]) -> Result<Matrix, RuleError> {
    let (d_out, d_in) = check_common_shape(pairs)?;
    let mut acc = Matrix::zeros(d_out, d_in);
    for (w, fp) in pairs {
        // Accumulate B·(w·A) without a separate dense temporary per client.
        acc = acc.add(&fp.b.matmul(&fp.a.scale(*w)));
    }
    Ok(acc)
}

/// FlexLoRA: materialize the dense update average, decompose it, and hand
/// each client the balanced √σ factorization of its top-`rᵢ` spectral
/// components. Shares the balanced split with the gauge-aware readout so
/// the two rules differ only in how they aggregate.
pub fn flexlora_aggregate(
    pairs: &[(f64, FactorPair)],
    profiles: &[ClientProfile],
) -> Result<BTreeMap<ClientId, FactorPair>, RuleError> {
    let dense = dense_update_average(pairs)?;
    let top_needed = profiles.iter().map(|p| p.rank).max().unwrap_or(1);
    let spec = dense_spectral_state(&dense, top_needed)?;
    let mut out = BTreeMap::new();
    for p in profiles {
        let take = p.rank.min(spec.len()).max(1);
        let indices: Vec<usize> = (0..take).collect();
        out.insert(p.client_id, balanced_factorize(&spec, &indices)?);
    }
    Ok(out)
}

/// Spectral form of a dense matrix with at least `top` leading components.
/// Small matrices use the Jacobi SVD kernel; larger ones use deterministic
/// subspace iteration, which costs Θ(d_out·d_in·k) per pass and stays exact
/// on the low-rank updates this pipeline produces.
pub(crate) fn dense_spectral_state(dense: &Matrix, top: usize) -> Result<SpectralState, RuleError> {
    let m = dense.rows().min(dense.cols());
    if m <= DENSE_SVD_JACOBI_LIMIT {
        let svd = thin_svd(dense)?;
        return Ok(SpectralState { u_s: svd.u, sigma: svd.sigma, v: svd.v });
    }
    let k = (top + SUBSPACE_ITER_OVERSAMPLE).min(m);
    let mut rng = derive_rng(
        FLEXLORA_SVD_SEED,
        &[stream::TRUNCATED_SVD, dense.rows() as u64, dense.cols() as u64],
    );
    let omega = gaussian_matrix(&mut rng, dense.cols(), k, 1.0);
    let mut y = dense.matmul(&omega);
    orthonormalize_columns(&mut y);
    for _ in 0..SUBSPACE_ITER_ROUNDS {
        let mut z = dense.matmul_transpose_self(&y); // d_in × k  (denseᵀ · y)
        orthonormalize_columns(&mut z);
        y = dense.matmul(&z);
        orthonormalize_columns(&mut y);
    }
    // Rayleigh-Ritz on the small projected matrix.
    let t = y.matmul_transpose_self(dense); // k × d_in
    let svd = thin_svd(&t)?;
    let u_s = y.matmul(&svd.u);
    Ok(SpectralState { u_s, sigma: svd.sigma, v: svd.v })
}

const FLEXLORA_SVD_SEED: u64 = 0x464c_4558_4c6f_5241;

fn orthonormalize_columns(m: &mut Matrix) {
    let rows = m.rows();
    let cols = m.cols();
    for j in 0..cols {
        for _ in 0..2 {
            for prev in 0..j {
                let dot: f64 = (0..rows).map(|i| m.get(i, j) * m.get(i, prev)).sum();
                for i in 0..rows {
                    let v = m.get(i, j) - dot * m.get(i, prev);
                    m.set(i, j, v);
                }
            }
        }
        let norm: f64 = (0..rows).map(|i| m.get(i, j).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for i in 0..rows {
                let v = m.get(i, j) / norm;
                m.set(i, j, v);
            }
        }
    }
}
