//! Gauge-aware aggregation for federated LoRA.
//!
//! A LoRA update `ΔW = B·A` admits infinitely many factorizations
//! `(B·Q, Q⁻¹·A)`; averaging raw factors therefore depends on an arbitrary
//! coordinate choice. This crate aggregates in a representation that does
//! not: client factors are gauge-fixed into subspace–coordinate form via
//! reduced QR, a consensus subspace is estimated from the weighted client
//! projectors (through the small Gram matrix, never a dense
//! `d_out × d_out` product), coordinates are averaged in that shared frame,
//! and heterogeneous-rank clients are re-initialized from an energy-ordered
//! readout of the server state.
//!
//! Alongside the gauge-aware rule, the crate ships reference aggregation
//! baselines (factor averaging, pad/truncate averaging, dense aggregation
//! with SVD redistribution) and a deterministic synthetic federation
//! simulator for comparing them.

pub mod baselines;
pub mod consensus;
pub mod fedsim;
pub mod gauge;
pub mod matrix;
pub mod readout;
pub mod rng;

pub use baselines::{fedit_aggregate, flexlora_aggregate, hetlora_aggregate, AggregationRule};
pub use consensus::{
    aggregate, build_weighted_basis, consensus_basis, materialize, project_coordinates,
    BudgetPolicy, ServerState, Submission,
};
pub use fedsim::{
    assign_ranks, generate_task, local_train, run_experiment, sample_participants,
    ExperimentSetup, RankAssignment, RoundRecord, Simulation, SyntheticTask,
};
pub use gauge::{
    aggregation_inconsistency, apply_gauge, gauge_fix, inconsistency_under_gauges, random_gauge,
    FactorPair, GaugeFixedUpdate,
};
pub use matrix::{numerical_rank, reduced_qr, sym_eig, thin_svd, Matrix, DEFAULT_RANK_TOL};
pub use readout::{
    alignment_scores, balanced_factorize, readout_all, select_components, spectral_readout,
    ClientProfile, ReadoutConfig, SpectralState,
};

/// Client identifier used throughout the federation pipeline.
pub type ClientId = u64;
