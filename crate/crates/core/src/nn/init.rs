//! Seeded weight initialization. A single RNG is threaded through model
//! construction in a fixed order, so a seed fully determines the initial state.

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

pub struct Init {
    rng: ChaCha12Rng,
}

impl Init {
    pub fn seeded(seed: u64) -> Self {
        use rand::SeedableRng;
        Init {
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// He-normal init for conv weights: std = sqrt(2 / fan_in).
    pub fn conv_weight(&mut self, out_ch: usize, in_ch: usize, kh: usize, kw: usize) -> Array4<f64> {
        let fan_in = (in_ch * kh * kw) as f64;
        let std = (2.0 / fan_in).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        Array4::from_shape_simple_fn((out_ch, in_ch, kh, kw), || dist.sample(&mut self.rng))
    }

    /// Uniform(-1/sqrt(in), 1/sqrt(in)) for fully connected weights.
    pub fn linear_weight(&mut self, out_dim: usize, in_dim: usize) -> Array2<f64> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Array2::from_shape_simple_fn((out_dim, in_dim), || self.rng.gen_range(-bound..bound))
    }
}
