//! Client-aware readout: spectral decomposition of the server state,
//! core–tail component selection against each client's historical subspace,
//! and balanced factor initialization.
//!
//! The server update is put into energy-ordered form by decomposing only the
//! small coordinate matrix: `Z_g = O·Σ·Vᵀ` and `U_s = U_ref·O`. Client `i`
//! keeps the top `floor(γ·rᵢ)` components (the shared core) and fills the
//! rest of its rank budget with the components most aligned to its history;
//! with no history it falls back to spectral order, which is the Frobenius-
//! optimal truncation.

use crate::consensus::ServerState;
use crate::gauge::FactorPair;
use crate::matrix::{thin_svd, Matrix, MatrixError};
use crate::ClientId;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReadoutError {
    #[error("history has {got} rows, spectral basis has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("component index {index} out of range (spectrum length {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("component selection is empty")]
    EmptySelection,
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// Energy-ordered decomposition of the server update.
#[derive(Debug, Clone)]
pub struct SpectralState {
    /// Left spectral directions in output space, `d_out × ℓ`, orthonormal.
    pub u_s: Matrix,
    /// Singular values of `Z_g`, nonincreasing, length `ℓ = min(R, d_in)`.
    pub sigma: Vec<f64>,
    /// Right spectral directions, `d_in × ℓ`, orthonormal.
    pub v: Matrix,
}

impl SpectralState {
    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    /// Dense update restricted to the given components; tests and metrics.
    pub fn partial_sum(&self, indices: &[usize]) -> Matrix {
        let mut acc = Matrix::zeros(self.u_s.rows(), self.v.rows());
        for &j in indices {
            let u_j = self.u_s.select_columns(&[j]);
            let v_j = self.v.select_columns(&[j]);
            acc.add_assign_scaled(&u_j.matmul(&v_j.transpose()), self.sigma[j]);
        }
        acc
    }
}

/// Per-client server-side bookkeeping.
#[derive(Debug, Clone)]
pub struct ClientProfile {
    pub client_id: ClientId,
    /// Adapter rank `rᵢ` the client can instantiate.
    pub rank: usize,
    pub sample_count: usize,
    /// Latest orthonormal basis from the client's most recent participation;
    /// absent until the client has participated.
    pub history: Option<Matrix>,
}

/// Core–tail selection parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReadoutConfig {
    /// Core ratio γ ∈ [0, 1]: fraction of each client's budget pinned to the
    /// top of the spectrum.
    pub core_ratio: f64,
}

impl Default for ReadoutConfig {
    fn default() -> Self {
        Self { core_ratio: 0.5 }
    }
}

impl ReadoutConfig {
    pub fn new(core_ratio: f64) -> Self {
        assert!((0.0..=1.0).contains(&core_ratio), "core ratio must be in [0, 1]");
        Self { core_ratio }
    }

    fn core_count(&self, rank: usize) -> usize {
        (self.core_ratio * rank as f64).floor() as usize
    }
}

/// Spectral decomposition of the server state via the coordinate matrix:
/// `thin_svd(Z_g) = O·Σ·Vᵀ`, then `U_s = U_ref·O`. The dense update is
/// never formed.
pub fn spectral_readout(state: &ServerState) -> Result<SpectralState, ReadoutError> {
    let svd = thin_svd(&state.z_g)?;
    let u_s = state.u_ref.matmul(&svd.u);
    Ok(SpectralState { u_s, sigma: svd.sigma, v: svd.v })
}

/// Alignment of each spectral direction with the client's history subspace:
/// `aⱼ = ‖historyᵀ · u_s[:, j]‖₂²`, in `[0, 1]` for orthonormal history.
pub fn alignment_scores(history: &Matrix, u_s: &Matrix) -> Result<Vec<f64>, ReadoutError> {
    if history.rows() != u_s.rows() {
        return Err(ReadoutError::DimensionMismatch {
            expected: u_s.rows(),
            got: history.rows(),
        });
    }
    let overlap = history.matmul_transpose_self(u_s); // h × ℓ
    let scores = (0..u_s.cols())
        .map(|j| (0..overlap.rows()).map(|i| overlap.get(i, j).powi(2)).sum())
        .collect();
    Ok(scores)
}

/// Selects `min(rᵢ, ℓ)` component indices for a client: the core
/// `{0, …, floor(γ·rᵢ)−1}` in spectral order, then the best-aligned
/// non-core components (ties broken toward lower spectral index). Without
/// history the whole budget follows spectral order. Returned ascending.
pub fn select_components(
    spec: &SpectralState,
    profile: &ClientProfile,
    cfg: &ReadoutConfig,
) -> Result<Vec<usize>, ReadoutError> {
    assert!(profile.rank >= 1, "client rank must be at least 1");
    let ell = spec.len();
    let budget = profile.rank.min(ell);
    let core = cfg.core_count(profile.rank).min(budget);

    let history = match &profile.history {
        Some(h) if budget < ell => h,
        _ => return Ok((0..budget).collect()),
    };

    let scores = alignment_scores(history, &spec.u_s)?;
    let mut selected: Vec<usize> = (0..core).collect();
    let mut tail: Vec<usize> = (core..ell).collect();
    tail.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).expect("alignment scores are finite").then(a.cmp(&b))
    });
    selected.extend(tail.into_iter().take(budget - core));
    selected.sort_unstable();
    Ok(selected)
}

/// Balanced factorization of the selected components:
/// `B = U_s[:, I]·diag(√σ_I)`, `A = diag(√σ_I)·V[:, I]ᵀ`, so each factor
/// carries `√σⱼ` per component and the product is `Σ_{j∈I} σⱼ uⱼ vⱼᵀ`.
pub fn balanced_factorize(
    spec: &SpectralState,
    indices: &[usize],
) -> Result<FactorPair, ReadoutError> {
    if indices.is_empty() {
        return Err(ReadoutError::EmptySelection);
    }
    for &j in indices {
        if j >= spec.len() {
            return Err(ReadoutError::IndexOutOfRange { index: j, len: spec.len() });
        }
    }
    let d_out = spec.u_s.rows();
    let d_in = spec.v.rows();
    let r = indices.len();
    let mut b = Matrix::zeros(d_out, r);
    let mut a = Matrix::zeros(r, d_in);
    for (jj, &j) in indices.iter().enumerate() {
        let root = spec.sigma[j].max(0.0).sqrt();
        for i in 0..d_out {
            b.set(i, jj, root * spec.u_s.get(i, j));
        }
        for i in 0..d_in {
            a.set(jj, i, root * spec.v.get(i, j));
        }
    }
    Ok(FactorPair { b, a, layer_id: 0 })
}

/// Per-client initializations from one spectral readout of the state.
/// Output is keyed by client id, independent of profile order.
pub fn readout_all(
    state: &ServerState,
    profiles: &[ClientProfile],
    cfg: &ReadoutConfig,
) -> Result<BTreeMap<ClientId, FactorPair>, ReadoutError> {
    let spec = spectral_readout(state)?;
    let mut out = BTreeMap::new();
    for profile in profiles {
        let indices = select_components(&spec, profile, cfg)?;
        let pair = balanced_factorize(&spec, &indices)?;
        out.insert(profile.client_id, pair);
    }
    Ok(out)
}
