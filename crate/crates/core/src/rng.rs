//! Deterministic RNG derivation. Every random quantity in the crate is
//! produced by a ChaCha20 stream keyed from a master seed plus a tag path
//! (purpose, round, client, ...), so any part of a run can be reproduced
//! statelessly from the seed alone.

use crate::matrix::{reduced_qr, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Stream-purpose tags. Kept in one place so derivations never collide.
pub mod stream {
    pub const TASK_SHARED_BASIS: u64 = 1;
    pub const TASK_PRIVATE_BASIS: u64 = 2;
    pub const TASK_COORDS: u64 = 3;
    pub const TASK_SAMPLES: u64 = 4;
    pub const TASK_BASE_WEIGHT: u64 = 5;
    pub const TASK_NOISE: u64 = 6;
    pub const CLIENT_INIT: u64 = 7;
    pub const PARTICIPATION: u64 = 8;
    pub const RANK_ASSIGNMENT: u64 = 9;
    pub const GAUGE: u64 = 10;
    pub const INCONSISTENCY: u64 = 11;
    pub const TRUNCATED_SVD: u64 = 12;
    pub const BENCH: u64 = 13;
    pub const EVAL_SAMPLES: u64 = 14;
}

/// SplitMix64 finalizer.
#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with a tag path into a single stream key.
pub fn mix(seed: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix(seed);
    for &t in tags {
        state = splitmix(state ^ splitmix(t.wrapping_add(0xa076_1d64_78bd_642f)));
    }
    state
}

/// ChaCha20 generator for the given seed and tag path.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(mix(seed, tags))
}

/// Matrix of i.i.d. N(0, std²) entries, filled row-major.
pub fn gaussian_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

/// Random matrix with orthonormal columns (`rows ≥ cols`), taken from the QR
/// factorization of a Gaussian draw. The nonnegative-pivot convention of the
/// QR kernel makes the output a deterministic function of the stream.
pub fn random_orthonormal(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Matrix {
    assert!(rows >= cols, "need rows >= cols for an orthonormal basis");
    loop {
        let g = gaussian_matrix(rng, rows, cols, 1.0);
        let qr = reduced_qr(&g, 1e-9).expect("gaussian draw is finite");
        if qr.rank == cols {
            return qr.q;
        }
        // Rank-deficient Gaussian draws have probability zero; retry.
    }
}
