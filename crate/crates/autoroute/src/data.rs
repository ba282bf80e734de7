//! Toy regression tasks: x ~ Normal(mu, sigma^2), y = sin(x) or sinc(x).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::numgrad::Tensor;
use crate::transfer::Dataset;

pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x.sin() / x
    }
}

fn gen(n: usize, rng: &mut ChaCha8Rng, mu: f64, sigma: f64, f: impl Fn(f64) -> f64) -> Dataset {
    let normal = Normal::new(mu, sigma).expect("sigma > 0");
    let xs: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Dataset {
        x: Tensor::from_fn(n, 1, |r, _| xs[r]),
        y: Tensor::from_fn(n, 1, |r, _| f(xs[r])),
    }
}

pub fn gen_sine(n: usize, rng: &mut ChaCha8Rng, mu: f64, sigma: f64) -> Dataset {
    gen(n, rng, mu, sigma, f64::sin)
}

pub fn gen_sinc(n: usize, rng: &mut ChaCha8Rng, mu: f64, sigma: f64) -> Dataset {
    gen(n, rng, mu, sigma, sinc)
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Nested seeded subsample: the index set for a smaller fraction is a subset
/// of every larger fraction's. Indices are returned sorted so fraction 1.0
/// reproduces the original set exactly.
pub fn subsample_indices(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    let take = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut idx: Vec<usize> = perm.into_iter().take(take).collect();
    idx.sort_unstable();
    idx
}
