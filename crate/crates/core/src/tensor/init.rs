use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
    GlorotUniform,
    /// `U(-b, b)` with `b = 1 / sqrt(fan_in)`; no orthogonalisation.
    UniformFanIn,
    Zeros,
}

impl FromStr for InitScheme {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "glorot_uniform" | "uniform-glorot" => Ok(Self::GlorotUniform),
            "uniform_fan_in" | "fallback" => Ok(Self::UniformFanIn),
            "zeros" => Ok(Self::Zeros),
            other => Err(TensorError::UnknownScheme(other.to_string())),
        }
    }
}

/// `(fan_in, fan_out)` for a weight shaped `[.., fan_in, fan_out]`.
fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [.., i, o] => {
            let rf: usize = shape[..shape.len() - 2].iter().product();
            (i * rf, o * rf)
        }
    }
}

impl InitScheme {
    pub fn bound(self, shape: &[usize]) -> f64 {
        let (fi, fo) = fans(shape);
        match self {
            Self::GlorotUniform => (6.0 / (fi + fo).max(1) as f64).sqrt(),
            Self::UniformFanIn => 1.0 / (fi.max(1) as f64).sqrt(),
            Self::Zeros => 0.0,
        }
    }
}

/// Deterministic for a given `(shape, scheme, seed)` on every platform.
pub fn seeded_init(shape: &[usize], scheme: InitScheme, seed: u64) -> Result<Tensor> {
    let bound = scheme.bound(shape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Tensor::from_fn(shape.to_vec(), |_| {
        if bound == 0.0 {
            0.0
        } else {
            rng.random_range(-bound..=bound)
        }
    }))
}
