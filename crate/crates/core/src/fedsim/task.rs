//! Synthetic heterogeneous low-rank regression tasks, full-batch local
//! training, participation sampling, and rank assignment.
//!
//! Each client fits `y = (W0 + ΔW)·x` where the ground-truth update
//! `ΔW*ᵢ = shared·Sᵢ + privateᵢ·Pᵢ` splits into a column space shared by
//! everyone and a per-client private one, orthogonal by construction. The
//! private-to-shared energy fraction η is the heterogeneity knob: at η = 0
//! all clients share one update subspace, at η → 1 they share almost none.

use super::SimError;
use crate::gauge::FactorPair;
use crate::matrix::Matrix;
use crate::rng::{derive_rng, gaussian_matrix, random_orthonormal, stream};
use crate::ClientId;
use std::collections::BTreeMap;

/// Shape and sampling parameters of a synthetic task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub d_out: usize,
    pub d_in: usize,
    /// Dimension of the shared update column space.
    pub k_shared: usize,
    /// Dimension of each client's private update column space.
    pub k_private: usize,
    pub n_clients: usize,
    /// Private energy fraction η ∈ [0, 1].
    pub private_energy: f64,
    pub noise_std: f64,
    pub train_samples: usize,
    pub eval_samples: usize,
}

impl TaskConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.d_out < 2 || self.d_in < 2 {
            return Err(SimError::InvalidConfig("dimensions must be at least 2".into()));
        }
        if self.k_shared + self.k_private == 0 {
            return Err(SimError::InvalidConfig(
                "k_shared + k_private must be at least 1".into(),
            ));
        }
        if self.k_shared + self.k_private > self.d_out.min(self.d_in) {
            return Err(SimError::InvalidConfig(
                "k_shared + k_private must not exceed min(d_out, d_in)".into(),
            ));
        }
        if self.n_clients == 0 {
            return Err(SimError::InvalidConfig("need at least one client".into()));
        }
        if !(0.0..=1.0).contains(&self.private_energy) {
            return Err(SimError::InvalidConfig("private energy must be in [0, 1]".into()));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(SimError::InvalidConfig("noise std must be finite and >= 0".into()));
        }
        if self.train_samples == 0 || self.eval_samples == 0 {
            return Err(SimError::InvalidConfig("sample counts must be positive".into()));
        }
        Ok(())
    }
}

/// One client's data: ground-truth update plus train/eval regression pairs.
#[derive(Debug, Clone)]
struct ClientData {
    true_update: Matrix, // d_out × d_in
    train_x: Matrix,     // d_in × n
    train_y: Matrix,     // d_out × n
    eval_x: Matrix,
    eval_y: Matrix,
}

/// Frozen synthetic task, fully determined by its config and seed.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    cfg: TaskConfig,
    w0: Matrix,
    shared_basis: Matrix,
    clients: Vec<ClientData>,
}

/// Deterministic task generation; see [`TaskConfig`] for the knobs.
pub fn generate_task(cfg: &TaskConfig, seed: u64) -> Result<SyntheticTask, SimError> {
    cfg.validate()?;
    let d_out = cfg.d_out;
    let d_in = cfg.d_in;

    let shared_basis = if cfg.k_shared > 0 {
        let mut rng = derive_rng(seed, &[stream::TASK_SHARED_BASIS]);
        random_orthonormal(&mut rng, d_out, cfg.k_shared)
    } else {
        Matrix::zeros(d_out, 0)
    };

    let w0 = {
        let mut rng = derive_rng(seed, &[stream::TASK_BASE_WEIGHT]);
        gaussian_matrix(&mut rng, d_out, d_in, 1.0 / (d_in as f64).sqrt())
    };

    let eta = match (cfg.k_shared, cfg.k_private) {
        (_, 0) => 0.0,
        (0, _) => 1.0,
        _ => cfg.private_energy,
    };

    let mut clients = Vec::with_capacity(cfg.n_clients);
    for i in 0..cfg.n_clients as u64 {
        // Private basis orthogonal to the shared one: QR of the stacked
        // [shared | draw] keeps the shared prefix and orthogonalizes the rest.
        let private_basis = if cfg.k_private > 0 {
            let mut rng = derive_rng(seed, &[stream::TASK_PRIVATE_BASIS, i]);
            loop {
                let draw = gaussian_matrix(&mut rng, d_out, cfg.k_private, 1.0);
                let stacked = shared_basis.hstack(&draw);
                let qr = crate::matrix::reduced_qr(&stacked, 1e-9)
                    .expect("finite stacked basis");
                if qr.rank == cfg.k_shared + cfg.k_private {
                    let cols: Vec<usize> = (cfg.k_shared..qr.rank).collect();
                    break qr.q.select_columns(&cols);
                }
            }
        } else {
            Matrix::zeros(d_out, 0)
        };

        let mut coord_rng = derive_rng(seed, &[stream::TASK_COORDS, i]);
        let mut true_update = Matrix::zeros(d_out, d_in);
        if cfg.k_shared > 0 {
            let s = gaussian_matrix(&mut coord_rng, cfg.k_shared, d_in, 1.0);
            let part = shared_basis.matmul(&s);
            let norm = part.frobenius_norm();
            let target = (1.0 - eta).sqrt();
            if norm > 0.0 && target > 0.0 {
                true_update.add_assign_scaled(&part, target / norm);
            }
        }
        if cfg.k_private > 0 {
            let p = gaussian_matrix(&mut coord_rng, cfg.k_private, d_in, 1.0);
            let part = private_basis.matmul(&p);
            let norm = part.frobenius_norm();
            let target = eta.sqrt();
            if norm > 0.0 && target > 0.0 {
                true_update.add_assign_scaled(&part, target / norm);
            }
        }

        let effective = w0.add(&true_update);
        let sample = |rng_tag: u64, noise_tag: u64, n: usize| {
            let mut x_rng = derive_rng(seed, &[rng_tag, i]);
            let x = gaussian_matrix(&mut x_rng, d_in, n, 1.0);
            let mut y = effective.matmul(&x);
            if cfg.noise_std > 0.0 {
                let mut n_rng = derive_rng(seed, &[noise_tag, i]);
                let noise = gaussian_matrix(&mut n_rng, d_out, n, cfg.noise_std);
                y = y.add(&noise);
            }
            (x, y)
        };
        let (train_x, train_y) = sample(stream::TASK_SAMPLES, stream::TASK_NOISE, cfg.train_samples);
        let (eval_x, eval_y) =
            sample(stream::EVAL_SAMPLES, stream::TASK_NOISE ^ 0xe7a1, cfg.eval_samples);

        clients.push(ClientData { true_update, train_x, train_y, eval_x, eval_y });
    }

    Ok(SyntheticTask { cfg: cfg.clone(), w0, shared_basis, clients })
}

impl SyntheticTask {
    pub fn config(&self) -> &TaskConfig {
        &self.cfg
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn base_weight(&self) -> &Matrix {
        &self.w0
    }

    pub fn shared_basis(&self) -> &Matrix {
        &self.shared_basis
    }

    pub fn true_update(&self, client: ClientId) -> &Matrix {
        &self.clients[client as usize].true_update
    }

    pub fn train_pairs(&self, client: ClientId) -> (&Matrix, &Matrix) {
        let c = &self.clients[client as usize];
        (&c.train_x, &c.train_y)
    }

    pub fn eval_pairs(&self, client: ClientId) -> (&Matrix, &Matrix) {
        let c = &self.clients[client as usize];
        (&c.eval_x, &c.eval_y)
    }

    /// Weighted mean of the participating ground-truth updates.
    pub fn weighted_true_update(&self, weighted_ids: &[(ClientId, f64)]) -> Matrix {
        let mut acc = Matrix::zeros(self.cfg.d_out, self.cfg.d_in);
        for &(id, w) in weighted_ids {
            acc.add_assign_scaled(self.true_update(id), w);
        }
        acc
    }

    /// Mean squared prediction error per sample coordinate of `W0 + delta`
    /// over every client's held-out set.
    pub fn eval_mse(&self, delta: &Matrix) -> f64 {
        let effective = self.w0.add(delta);
        let mut total = 0.0;
        for c in &self.clients {
            let pred = effective.matmul(&c.eval_x);
            let err = pred.sub(&c.eval_y).frobenius_norm();
            total += err * err / (c.eval_y.rows() * c.eval_y.cols()) as f64;
        }
        total / self.clients.len() as f64
    }
}

/// Full-batch training loss `‖(W0 + B·A)·X − Y‖²_F / (2n)` for one client.
pub fn local_loss(task: &SyntheticTask, client: ClientId, b: &Matrix, a: &Matrix) -> f64 {
    let (x, y) = task.train_pairs(client);
    let n = x.cols() as f64;
    let pred = task.base_weight().matmul(x).add(&b.matmul(&a.matmul(x)));
    let err = pred.sub(y).frobenius_norm();
    err * err / (2.0 * n)
}

/// Analytic gradients of [`local_loss`]: with residual `E = Ŷ − Y` and
/// `G = E·Xᵀ/n`, the factor gradients are `G·Aᵀ` and `Bᵀ·G`. Both are
/// assembled thin-first, so no `d_out × d_in` product is formed.
pub fn lora_gradients(
    task: &SyntheticTask,
    client: ClientId,
    b: &Matrix,
    a: &Matrix,
) -> (Matrix, Matrix) {
    let (x, y) = task.train_pairs(client);
    let n = x.cols() as f64;
    let ax = a.matmul(x); // r × n
    let residual = task.base_weight().matmul(x).add(&b.matmul(&ax)).sub(y); // d_out × n
    let grad_b = residual.matmul(&ax.transpose()).scale(1.0 / n);
    let grad_a = b.matmul_transpose_self(&residual).matmul(&x.transpose()).scale(1.0 / n);
    (grad_b, grad_a)
}

/// Deterministic full-batch gradient descent on the factor pair.
pub fn local_train(
    task: &SyntheticTask,
    client: ClientId,
    init: &FactorPair,
    steps: usize,
    lr: f64,
) -> Result<FactorPair, SimError> {
    assert!(steps >= 1, "need at least one step");
    assert!(lr >= 0.0, "learning rate must be nonnegative");
    let mut b = init.b.clone();
    let mut a = init.a.clone();
    for _ in 0..steps {
        if lr == 0.0 {
            break;
        }
        let (grad_b, grad_a) = lora_gradients(task, client, &b, &a);
        b.add_assign_scaled(&grad_b, -lr);
        a.add_assign_scaled(&grad_a, -lr);
        if !b.is_finite() || !a.is_finite() {
            return Err(SimError::Divergence { client, loss: f64::INFINITY });
        }
    }
    let loss = local_loss(task, client, &b, &a);
    if !loss.is_finite() {
        return Err(SimError::Divergence { client, loss });
    }
    Ok(FactorPair { b, a, layer_id: init.layer_id })
}

/// Uniform sample of `max(1, round(fraction·n))` distinct client ids,
/// deterministic in `(seed, round)`, returned in ascending order.
pub fn sample_participants(
    n_clients: usize,
    fraction: f64,
    round: u64,
    seed: u64,
) -> Vec<ClientId> {
    assert!(fraction > 0.0 && fraction <= 1.0, "participation fraction must be in (0, 1]");
    assert!(n_clients >= 1);
    let count = ((fraction * n_clients as f64).round() as usize).clamp(1, n_clients);
    let mut ids: Vec<ClientId> = (0..n_clients as ClientId).collect();
    let mut rng = derive_rng(seed, &[stream::PARTICIPATION, round]);
    // Partial Fisher-Yates: the first `count` slots are the sample.
    for i in 0..count {
        let j = i + rand::Rng::gen_range(&mut rng, 0..(n_clients - i));
        ids.swap(i, j);
    }
    let mut picked: Vec<ClientId> = ids[..count].to_vec();
    picked.sort_unstable();
    picked
}

/// Population-level rank pattern: rank levels plus the fraction of clients
/// at each level.
#[derive(Debug, Clone, PartialEq)]
pub struct RankAssignment {
    pub levels: Vec<usize>,
    pub proportions: Vec<f64>,
}

impl RankAssignment {
    pub fn fixed(rank: usize) -> Self {
        Self { levels: vec![rank], proportions: vec![1.0] }
    }

    /// Equal share of clients at every level.
    pub fn uniform(levels: Vec<usize>) -> Self {
        let p = 1.0 / levels.len() as f64;
        let proportions = vec![p; levels.len()];
        Self { levels, proportions }
    }

    /// Bell-shaped shares (binomial weights): most clients at mid ranks.
    pub fn normal(levels: Vec<usize>) -> Self {
        let l = levels.len();
        let mut weights = Vec::with_capacity(l);
        let mut c = 1.0f64;
        for i in 0..l {
            weights.push(c);
            c = c * (l - 1 - i) as f64 / (i + 1) as f64;
        }
        let total: f64 = weights.iter().sum();
        Self { levels, proportions: weights.into_iter().map(|w| w / total).collect() }
    }

    /// Geometrically decreasing shares: most clients at the lowest rank,
    /// a long tail of better-provisioned ones.
    pub fn heavy_tail(levels: Vec<usize>) -> Self {
        let l = levels.len();
        let weights: Vec<f64> = (0..l).map(|i| 0.5f64.powi(i as i32)).collect();
        let total: f64 = weights.iter().sum();
        Self { levels, proportions: weights.into_iter().map(|w| w / total).collect() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.levels.is_empty() || self.levels.len() != self.proportions.len() {
            return Err(SimError::InvalidConfig("rank levels and proportions must align".into()));
        }
        if self.levels.iter().any(|&r| r == 0) {
            return Err(SimError::InvalidConfig("every rank level must be at least 1".into()));
        }
        let sum: f64 = self.proportions.iter().sum();
        if self.proportions.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(SimError::InvalidConfig("proportions must be nonnegative and sum to 1".into()));
        }
        Ok(())
    }

    pub fn max_rank(&self) -> usize {
        self.levels.iter().copied().max().unwrap_or(1)
    }
}

/// Deterministic rank assignment: per-level counts are `floor(pₖ·n)` with
/// leftover clients assigned to the modal level, then the rank multiset is
/// shuffled over client ids with the seeded stream.
pub fn assign_ranks(
    n_clients: usize,
    dist: &RankAssignment,
    seed: u64,
) -> Result<BTreeMap<ClientId, usize>, SimError> {
    dist.validate()?;
    let mut counts: Vec<usize> =
        dist.proportions.iter().map(|p| (p * n_clients as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let modal = dist
        .proportions
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.partial_cmp(b).unwrap().then(ib.cmp(ia)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    counts[modal] += n_clients - assigned;

    let mut ranks: Vec<usize> = Vec::with_capacity(n_clients);
    for (level, &count) in dist.levels.iter().zip(&counts) {
        ranks.extend(std::iter::repeat(*level).take(count));
    }
    let mut rng = derive_rng(seed, &[stream::RANK_ASSIGNMENT]);
    for i in (1..ranks.len()).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        ranks.swap(i, j);
    }
    Ok((0..n_clients as ClientId).zip(ranks).collect())
}
