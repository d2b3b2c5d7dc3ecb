//! Shared inputs for the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vxc_core::grid::Dims;
use vxc_core::phantom::{generate, PhantomSpec, PhantomSubject};
use vxc_core::{FeatureVolume, Mask};

/// Phantom subjects at `dims`, seed 0.
pub fn phantom(dims: Dims, subjects: usize) -> Vec<PhantomSubject> {
    generate(&PhantomSpec { dims, subjects, ..Default::default() }).expect("valid phantom spec")
}

/// Uniform(-1, 1) features, reproducible per seed.
pub fn random_features(dims: Dims, channels: usize, seed: u64) -> FeatureVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product::<usize>() * channels;
    let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    FeatureVolume::new(dims, channels, [1.0; 3], data).expect("consistent shape")
}

/// Central box covering half of each axis.
pub fn central_box(dims: Dims) -> Mask {
    Mask::from_fn(dims, |p| (0..3).all(|a| p[a] >= dims[a] / 4 && p[a] < dims[a] - dims[a] / 4))
}

/// Row-major `n x n` matrix with a bright diagonal band plus noise.
pub fn banded_matrix(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = i as f64 - j as f64 - 2.0;
            m[i * n + j] = (-d * d / 8.0).exp() + 0.1 * rng.random::<f64>();
        }
    }
    m
}
