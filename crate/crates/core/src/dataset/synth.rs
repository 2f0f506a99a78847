use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{Error, Result};

/// Two informative features followed by eight pure-noise features.
pub const SYNTH_FEATURES: usize = 10;

/// `E[y | x] = 2 sin(x1) + x2`.
pub fn synth_mean(x: ArrayView1<f64>) -> f64 {
    2.0 * x[0].sin() + x[1]
}

/// Noise standard deviation `0.1 + 0.4 x2`.
pub fn synth_noise_std(x: ArrayView1<f64>) -> f64 {
    0.1 + 0.4 * x[1]
}

/// Heteroskedastic regression data on `[0,4]^10`, fully determined by `seed`.
pub fn synth_heteroskedastic(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("synthetic dataset needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::zeros((n, SYNTH_FEATURES));
    let mut y = Array1::zeros(n);
    for i in 0..n {
        for j in 0..SYNTH_FEATURES {
            x[[i, j]] = rng.random_range(0.0..4.0);
        }
        let z: f64 = StandardNormal.sample(&mut rng);
        let row = x.row(i);
        y[i] = synth_mean(row) + synth_noise_std(row) * z;
    }
    Dataset::new(x, y)
}
