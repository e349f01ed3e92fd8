//! Seeded synthetic inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::grouped::AttentionHeads;
use crate::latent::LatentGrid;
use crate::tensor::{Matrix, Real};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal entries.
pub fn random_matrix<T: Real>(rows: usize, cols: usize, seed: u64) -> Matrix<T> {
    let mut rng = rng(seed);
    normal_matrix(rows, cols, &mut rng)
}

pub fn normal_matrix<T: Real>(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        T::of(v)
    })
    .expect("normal samples are finite")
}

pub fn random_heads<T: Real>(n: usize, n_heads: usize, d_head: usize, seed: u64) -> AttentionHeads<T> {
    let mut rng = rng(seed);
    let mut stack = || (0..n_heads).map(|_| normal_matrix(n, d_head, &mut rng)).collect::<Vec<_>>();
    let q = stack();
    let k = stack();
    let v = stack();
    AttentionHeads::new(q, k, v).expect("consistent head shapes")
}

pub fn random_assignment(n: usize, n_groups: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng(seed);
    (0..n).map(|_| rng.random_range(0..n_groups)).collect()
}

/// Token features with latent structure: a rank-`rank` spatial pattern shared
/// across frames, a per-shot offset, and isotropic noise.
pub fn structured_features<T: Real>(grid: &LatentGrid, rank: usize, seed: u64) -> Matrix<T> {
    let mut rng = rng(seed);
    let d = grid.d_model;
    let rank = rank.max(1);
    let basis: Matrix<f64> = normal_matrix(rank, d, &mut rng);
    let coeffs: Matrix<f64> = normal_matrix(grid.frame_tokens(), rank, &mut rng);
    let offsets: Matrix<f64> = normal_matrix(grid.shots.len(), d, &mut rng);
    let mut data = Vec::with_capacity(grid.n_tokens() * d);
    for frame in 0..grid.t {
        let shot = grid.shots.shot_of_frame(frame);
        for p in 0..grid.frame_tokens() {
            for c in 0..d {
                let low_rank: f64 = (0..rank).map(|r| coeffs.get(p, r) * basis.get(r, c)).sum();
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push(T::of(low_rank + 0.5 * offsets.get(shot, c) + 0.25 * noise));
            }
        }
    }
    Matrix::new(grid.n_tokens(), d, data).expect("finite features")
}
