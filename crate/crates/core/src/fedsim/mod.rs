//! Synthetic federated simulation: the round loop tying local training,
//! gauge fixing, server aggregation, and client readout together, with
//! per-round metric records.
//!
//! The loop is memoryless given (seed, round index, carried server state),
//! so runs can be checkpointed and resumed bit-identically, and identical
//! configurations reproduce identical record streams regardless of how many
//! worker threads train clients.

mod task;

pub use task::{
    assign_ranks, generate_task, local_loss, local_train, lora_gradients, sample_participants,
    RankAssignment, SyntheticTask, TaskConfig,
};

use crate::baselines::{
    dense_update_average, fedit_aggregate, hetlora_padded_average, truncate_pair,
    AggregationRule, RuleError,
};
use crate::consensus::{aggregate, materialize, AggregateError, ServerState, Submission};
use crate::gauge::{
    aggregation_inconsistency, apply_gauge, gauge_fix, random_gauge, FactorPair, GaugeError,
    GaugeFixedUpdate,
};
use crate::matrix::{Matrix, MatrixError, DEFAULT_RANK_TOL};
use crate::readout::{
    balanced_factorize, readout_all, ClientProfile, ReadoutError, SpectralState,
};
use crate::rng::{derive_rng, gaussian_matrix, mix, stream};
use crate::ClientId;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("client {client} diverged (loss = {loss}); lower the learning rate")]
    Divergence { client: ClientId, loss: f64 },
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Gauge(#[from] GaugeError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Readout(#[from] ReadoutError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// Complete experiment description; everything a run needs besides the seed
/// is in here, and two runs with equal setups produce identical records.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSetup {
    pub task: TaskConfig,
    pub rule: AggregationRule,
    pub rounds: usize,
    /// Fraction of clients sampled each round, in (0, 1].
    pub participation: f64,
    pub ranks: RankAssignment,
    pub local_steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Independent tasks sharing the round loop; adapters aggregate per layer.
    pub layers: usize,
    /// Record real aggregation wall time. Off by default: timing is the one
    /// nondeterministic field, and default records stay byte-reproducible.
    pub record_timing: bool,
    /// Per-round gauge-attack probes of the aggregation rule (0 = off).
    pub inconsistency_trials: usize,
    pub inconsistency_cond: f64,
    /// Replace every upload by a random gauge-equivalent representative.
    pub gauge_attack: bool,
    pub gauge_attack_cond: f64,
}

impl ExperimentSetup {
    pub fn validate(&self) -> Result<(), SimError> {
        self.task.validate()?;
        self.ranks.validate()?;
        if self.ranks.max_rank() > self.task.d_out.min(self.task.d_in) {
            return Err(SimError::InvalidConfig(
                "client ranks must not exceed min(d_out, d_in)".into(),
            ));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(SimError::InvalidConfig("participation must be in (0, 1]".into()));
        }
        if self.local_steps == 0 {
            return Err(SimError::InvalidConfig("local_steps must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(SimError::InvalidConfig("lr must be positive and finite".into()));
        }
        if self.layers == 0 {
            return Err(SimError::InvalidConfig("layers must be at least 1".into()));
        }
        if self.inconsistency_trials > 0 && self.inconsistency_cond < 1.0 {
            return Err(SimError::InvalidConfig("inconsistency cond must be >= 1".into()));
        }
        if self.gauge_attack && self.gauge_attack_cond < 1.0 {
            return Err(SimError::InvalidConfig("gauge attack cond must be >= 1".into()));
        }
        Ok(())
    }
}

/// Metrics for one communication round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    pub participant_ids: Vec<ClientId>,
    /// Mean squared prediction error of the server update on held-out data.
    pub eval_loss: f64,
    /// Relative distance of the materialized server update from the
    /// weighted mean of the participants' ground-truth updates.
    pub recovery_error: f64,
    /// Server aggregation wall time in seconds; 0 unless timing is enabled.
    pub wall_time_agg: f64,
    /// Worst-case gauge-attack inconsistency, when probing is enabled.
    pub inconsistency: Option<f64>,
}

/// Carried server-side aggregate for one layer, rule-dependent.
#[derive(Debug, Clone)]
pub enum RuleState {
    /// Consensus basis plus aggregated coordinates.
    Glora(ServerState),
    /// Broadcast factor pair (factor averaging and pad/truncate averaging).
    Broadcast(FactorPair),
    /// Energy-ordered form of the dense average (dense aggregation).
    Spectral(SpectralState),
}

#[derive(Debug, Clone, Default)]
struct LayerState {
    rule: Option<RuleState>,
    /// Latest basis per client from its most recent participation,
    /// excluding rounds newer than the state used for readout.
    histories: BTreeMap<ClientId, Matrix>,
    /// Bases stored this round, applied after the next readout.
    pending: Vec<(ClientId, Matrix)>,
}

/// Point-in-time image of a simulation, sufficient to resume it.
#[derive(Debug, Clone)]
pub struct SimSnapshot {
    pub next_round: u64,
    pub layers: Vec<LayerSnapshot>,
}

#[derive(Debug, Clone)]
pub struct LayerSnapshot {
    pub rule: Option<RuleState>,
    pub histories: Vec<(ClientId, Matrix)>,
    pub pending: Vec<(ClientId, Matrix)>,
}

/// Stepwise federated simulation.
pub struct Simulation {
    setup: ExperimentSetup,
    tasks: Vec<SyntheticTask>,
    ranks: BTreeMap<ClientId, usize>,
    layers: Vec<LayerState>,
    next_round: u64,
}

impl Simulation {
    pub fn new(setup: ExperimentSetup) -> Result<Self, SimError> {
        setup.validate()?;
        let tasks: Vec<SyntheticTask> = (0..setup.layers as u64)
            .map(|layer| generate_task(&setup.task, mix(setup.seed, &[layer])))
            .collect::<Result<_, _>>()?;
        let ranks = assign_ranks(setup.task.n_clients, &setup.ranks, setup.seed)?;
        let layers = vec![LayerState::default(); setup.layers];
        Ok(Self { setup, tasks, ranks, layers, next_round: 0 })
    }

    pub fn setup(&self) -> &ExperimentSetup {
        &self.setup
    }

    pub fn next_round(&self) -> u64 {
        self.next_round
    }

    pub fn client_rank(&self, id: ClientId) -> usize {
        self.ranks[&id]
    }

    pub fn task(&self, layer: usize) -> &SyntheticTask {
        &self.tasks[layer]
    }

    /// Dense update induced by the carried state of one layer, if a round
    /// has completed. Metrics and tests only.
    pub fn materialized_global(&self, layer: usize) -> Option<Matrix> {
        self.layers[layer].rule.as_ref().map(|state| match state {
            RuleState::Glora(s) => materialize(s),
            RuleState::Broadcast(p) => p.product(),
            RuleState::Spectral(spec) => spec.partial_sum(&(0..spec.len()).collect::<Vec<_>>()),
        })
    }

    pub fn snapshot(&self) -> SimSnapshot {
        SimSnapshot {
            next_round: self.next_round,
            layers: self
                .layers
                .iter()
                .map(|l| LayerSnapshot {
                    rule: l.rule.clone(),
                    histories: l.histories.iter().map(|(k, v)| (*k, v.clone())).collect(),
                    pending: l.pending.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds a simulation from its setup and a snapshot. Tasks and rank
    /// assignments are seed-derived, so they are regenerated rather than
    /// stored.
    pub fn restore(setup: ExperimentSetup, snapshot: SimSnapshot) -> Result<Self, SimError> {
        let mut sim = Self::new(setup)?;
        if snapshot.layers.len() != sim.layers.len() {
            return Err(SimError::InvalidConfig(
                "snapshot layer count does not match configuration".into(),
            ));
        }
        sim.next_round = snapshot.next_round;
        sim.layers = snapshot
            .layers
            .into_iter()
            .map(|l| LayerState {
                rule: l.rule,
                histories: l.histories.into_iter().collect(),
                pending: l.pending,
            })
            .collect();
        Ok(sim)
    }

    fn fresh_init(&self, layer: usize, client: ClientId) -> FactorPair {
        let rank = self.ranks[&client];
        let cfg = &self.setup.task;
        let mut rng = derive_rng(self.setup.seed, &[stream::CLIENT_INIT, layer as u64, client]);
        // Standard LoRA-style start: zero product, random right factor.
        let b = Matrix::zeros(cfg.d_out, rank);
        let a = gaussian_matrix(&mut rng, rank, cfg.d_in, 1.0 / (cfg.d_in as f64).sqrt());
        FactorPair { b, a, layer_id: layer as u32 }
    }

    /// Pads a readout pair up to the client rank: zero columns on B, fresh
    /// scaled-Gaussian rows on A, so the product is unchanged but gradient
    /// can still flow into the extra directions.
    fn pad_to_rank(
        &self,
        pair: FactorPair,
        rank: usize,
        round: u64,
        layer: usize,
        client: ClientId,
    ) -> FactorPair {
        if pair.rank() >= rank {
            return pair;
        }
        let cfg = &self.setup.task;
        let extra = rank - pair.rank();
        let mut rng = derive_rng(
            self.setup.seed,
            &[stream::CLIENT_INIT, round, layer as u64, client, 1],
        );
        let b = pair.b.hstack(&Matrix::zeros(cfg.d_out, extra));
        let a_extra = gaussian_matrix(&mut rng, extra, cfg.d_in, 1.0 / (cfg.d_in as f64).sqrt());
        let mut a = Matrix::zeros(rank, cfg.d_in);
        for i in 0..pair.rank() {
            for j in 0..cfg.d_in {
                a.set(i, j, pair.a.get(i, j));
            }
        }
        for i in 0..extra {
            for j in 0..cfg.d_in {
                a.set(pair.rank() + i, j, a_extra.get(i, j));
            }
        }
        FactorPair { b, a, layer_id: pair.layer_id }
    }

    fn profiles_for(&self, layer: usize, participants: &[ClientId]) -> Vec<ClientProfile> {
        participants
            .iter()
            .map(|&id| ClientProfile {
                client_id: id,
                rank: self.ranks[&id],
                sample_count: self.setup.task.train_samples,
                history: self.layers[layer].histories.get(&id).cloned(),
            })
            .collect()
    }

    /// Initializations for this round's participants on one layer: fresh
    /// LoRA factors before any aggregate exists, rule readout afterwards.
    fn round_inits(
        &self,
        layer: usize,
        round: u64,
        participants: &[ClientId],
    ) -> Result<BTreeMap<ClientId, FactorPair>, SimError> {
        let state = match &self.layers[layer].rule {
            None => {
                return Ok(participants
                    .iter()
                    .map(|&id| (id, self.fresh_init(layer, id)))
                    .collect())
            }
            Some(state) => state,
        };
        let mut out: BTreeMap<ClientId, FactorPair> = match state {
            RuleState::Glora(server_state) => {
                let readout_cfg = match &self.setup.rule {
                    AggregationRule::Glora { readout, .. } => *readout,
                    _ => crate::readout::ReadoutConfig::default(),
                };
                let profiles = self.profiles_for(layer, participants);
                readout_all(server_state, &profiles, &readout_cfg)?
            }
            RuleState::Broadcast(pair) => participants
                .iter()
                .map(|&id| (id, truncate_pair(pair, self.ranks[&id])))
                .collect(),
            RuleState::Spectral(spec) => {
                let mut map = BTreeMap::new();
                for &id in participants {
                    let take = self.ranks[&id].min(spec.len()).max(1);
                    let indices: Vec<usize> = (0..take).collect();
                    map.insert(id, balanced_factorize(spec, &indices)?);
                }
                map
            }
        };
        for (&id, pair) in out.iter_mut() {
            let mut owned = pair.clone();
            owned.layer_id = layer as u32;
            owned = self.pad_to_rank(owned, self.ranks[&id], round, layer, id);
            *pair = owned;
        }
        Ok(out)
    }

    /// Runs one communication round and returns its record.
    pub fn step(&mut self) -> Result<RoundRecord, SimError> {
        let round = self.next_round;
        let setup = self.setup.clone();
        let cfg = &setup.task;
        let participants =
            sample_participants(cfg.n_clients, setup.participation, round, setup.seed);

        // Weights proportional to sample counts, normalized per round.
        // Sample counts are homogeneous here, so this is uniform.
        let weight = 1.0 / participants.len() as f64;
        let weighted_ids: Vec<(ClientId, f64)> =
            participants.iter().map(|&id| (id, weight)).collect();

        let mut eval_sum = 0.0;
        let mut recovery_sum = 0.0;
        let mut wall_time = 0.0;
        let mut inconsistency: Option<f64> = None;

        for layer in 0..setup.layers {
            let inits = self.round_inits(layer, round, &participants)?;

            // The bases stored last round become visible to the next
            // readout only now, matching the store-after-readout order.
            let pending: Vec<(ClientId, Matrix)> = self.layers[layer].pending.drain(..).collect();
            for (id, u) in pending {
                self.layers[layer].histories.insert(id, u);
            }

            let task = &self.tasks[layer];
            let trained: Vec<(ClientId, FactorPair)> = participants
                .par_iter()
                .map(|&id| {
                    let fp = local_train(task, id, &inits[&id], setup.local_steps, setup.lr)?;
                    Ok((id, fp))
                })
                .collect::<Result<_, SimError>>()?;

            let uploads: Vec<(f64, FactorPair)> = trained
                .into_iter()
                .map(|(id, fp)| {
                    let fp = if setup.gauge_attack {
                        let q = random_gauge(
                            fp.rank(),
                            mix(setup.seed, &[stream::GAUGE, round, layer as u64, id]),
                            setup.gauge_attack_cond,
                        );
                        apply_gauge(&fp, &q)?
                    } else {
                        fp
                    };
                    Ok((weight, fp))
                })
                .collect::<Result<_, SimError>>()?;

            let (state, global, elapsed) =
                aggregate_rule(&setup.rule, &participants, &uploads)?;

            if let RuleState::Glora(_) = &state {
                // Store current client subspaces for future readouts.
                let mut pending = Vec::with_capacity(uploads.len());
                for (&id, (_, fp)) in participants.iter().zip(&uploads) {
                    match gauge_fix(fp, DEFAULT_RANK_TOL) {
                        Ok(update) => pending.push((id, update.u)),
                        Err(GaugeError::ZeroUpdate) => continue,
                        Err(e) => return Err(e.into()),
                    }
                }
                self.layers[layer].pending = pending;
            }

            eval_sum += task.eval_mse(&global);
            let target = task.weighted_true_update(&weighted_ids);
            recovery_sum += global.sub(&target).frobenius_norm()
                / target.frobenius_norm().max(1e-300);
            wall_time += elapsed;

            if setup.inconsistency_trials > 0 {
                let probe = aggregation_inconsistency(
                    &setup.rule,
                    &uploads,
                    setup.inconsistency_trials,
                    setup.inconsistency_cond,
                    mix(setup.seed, &[stream::INCONSISTENCY, round, layer as u64]),
                )?;
                inconsistency = Some(inconsistency.unwrap_or(0.0).max(probe));
            }

            self.layers[layer].rule = Some(state);
        }

        self.next_round += 1;
        Ok(RoundRecord {
            round,
            participant_ids: participants,
            eval_loss: eval_sum / setup.layers as f64,
            recovery_error: recovery_sum / setup.layers as f64,
            wall_time_agg: if setup.record_timing { wall_time } else { 0.0 },
            inconsistency,
        })
    }
}

/// Server-side aggregation for one layer: returns the carried state, the
/// materialized global update for metrics, and the server wall time.
/// Gauge fixing counts as client-side work and is excluded from the timer;
/// the baselines' dense materialization is their server cost and included.
fn aggregate_rule(
    rule: &AggregationRule,
    participants: &[ClientId],
    uploads: &[(f64, FactorPair)],
) -> Result<(RuleState, Matrix, f64), SimError> {
    match rule {
        AggregationRule::Glora { budget, .. } => {
            let mut kept: Vec<(ClientId, f64, GaugeFixedUpdate)> = Vec::new();
            for (&id, (w, fp)) in participants.iter().zip(uploads) {
                match gauge_fix(fp, DEFAULT_RANK_TOL) {
                    Ok(update) => kept.push((id, *w, update)),
                    Err(GaugeError::ZeroUpdate) => continue,
                    Err(e) => return Err(e.into()),
                }
            }
            if kept.is_empty() {
                return Err(SimError::Rule(RuleError::EmptyRound));
            }
            let total: f64 = kept.iter().map(|(_, w, _)| *w).sum();
            let submissions: Vec<Submission> = kept
                .into_iter()
                .map(|(client_id, w, update)| Submission {
                    client_id,
                    weight: w / total,
                    update,
                })
                .collect();
            let start = Instant::now();
            let state = aggregate(&submissions, *budget)?;
            let elapsed = start.elapsed().as_secs_f64();
            let global = materialize(&state);
            Ok((RuleState::Glora(state), global, elapsed))
        }
        AggregationRule::FedIt => {
            let start = Instant::now();
            let avg = fedit_aggregate(uploads)?;
            let elapsed = start.elapsed().as_secs_f64();
            let global = avg.product();
            Ok((RuleState::Broadcast(avg), global, elapsed))
        }
        AggregationRule::HetLora => {
            let start = Instant::now();
            let avg = hetlora_padded_average(uploads)?;
            let elapsed = start.elapsed().as_secs_f64();
            let global = avg.product();
            Ok((RuleState::Broadcast(avg), global, elapsed))
        }
        AggregationRule::FlexLora => {
            let top = uploads.iter().map(|(_, fp)| fp.rank()).max().unwrap_or(1);
            let start = Instant::now();
            let dense = dense_update_average(uploads)?;
            let spec = crate::baselines::dense_spectral_state(&dense, top)?;
            let elapsed = start.elapsed().as_secs_f64();
            Ok((RuleState::Spectral(spec), dense, elapsed))
        }
    }
}

/// Runs a full experiment and collects every round record. The stepwise
/// [`Simulation`] API is the streaming alternative that preserves partial
/// results on failure.
pub fn run_experiment(setup: &ExperimentSetup) -> Result<Vec<RoundRecord>, SimError> {
    let mut sim = Simulation::new(setup.clone())?;
    let mut records = Vec::with_capacity(setup.rounds);
    for _ in 0..setup.rounds {
        records.push(sim.step()?);
    }
    Ok(records)
}
