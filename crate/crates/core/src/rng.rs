//! Seeded random streams.
//!
//! Every stochastic component draws from its own ChaCha stream derived from
//! a seed and a fixed stream id, so changing how often one component draws
//! never shifts another component's numbers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Scalar, Tensor};

pub type SeededRng = ChaCha8Rng;

pub mod streams {
    pub const INIT: u64 = 0;
    pub const ADJUST: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROP_PATH: u64 = 3;
    pub const PROTOTYPES: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const LAYER_SAMPLING: u64 = 6;
}

pub fn stream(seed: u64, id: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Normal(0, std) draw rejected outside two standard deviations.
pub fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub fn truncated_normal_tensor<T: Scalar>(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(truncated_normal(rng, std))).collect();
    Tensor::new(shape, data).expect("shape product matches generated length")
}
