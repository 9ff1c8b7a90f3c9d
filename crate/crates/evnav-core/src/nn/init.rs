//! Deterministic parameter initialization.

use crate::scalar::Scalar;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// He-style initialization: zero-mean normal with stdev sqrt(2 / fan_in).
/// Sampling runs in double precision so f32 and f64 models draw the same
/// underlying sequence.
pub fn he_normal<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, n: usize) -> Vec<T> {
    assert!(fan_in > 0);
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()
}
