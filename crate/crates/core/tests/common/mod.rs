#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use nplda::gplda::GPLDAModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

pub fn normal_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

/// `B B' / n + floor * I`, well conditioned for moderate `floor`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let b = normal_mat(rng, n, n);
    &b * b.transpose() / n as f64 + DMatrix::identity(n, n) * floor
}

pub fn random_symmetric(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
    let b = normal_mat(rng, n, n) * scale;
    (&b + b.transpose()) * 0.5
}

pub fn random_gplda(rng: &mut ChaCha8Rng, dim: usize, rank: usize) -> GPLDAModel {
    GPLDAModel {
        phi: normal_mat(rng, dim, rank),
        sigma: random_spd(rng, dim, 0.5),
        mu: normal_vec(rng, dim) * 0.3,
    }
}
