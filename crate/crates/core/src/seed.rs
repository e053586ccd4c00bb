//! Splittable seeding: every stage of an experiment derives its own stream
//! from the master seed and a stage name, so adding or reordering stages
//! never perturbs the random draws of the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Tensor;

pub type Rng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for `stage` under `master`: `splitmix64(master ^ fnv1a(stage))`.
pub fn derive(master: u64, stage: &str) -> u64 {
    splitmix64(master ^ fnv1a(stage.as_bytes()))
}

/// Seed for an indexed sub-stream, e.g. one image within a batch.
pub fn derive_indexed(master: u64, stage: &str, index: u64) -> u64 {
    splitmix64(derive(master, stage) ^ splitmix64(index))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data)
}
