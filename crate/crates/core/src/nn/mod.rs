//! A small reverse-mode neural network toolkit over `f64` tensors.
//!
//! Layers are stateless with respect to the forward pass: `forward` returns the
//! output together with a cache, and `backward` consumes that cache, accumulates
//! parameter gradients and returns the gradient with respect to the input.
//! Activations use the `(batch, channel, height, width)` layout.

mod conv;
mod linear;
mod norm;
mod ops;
mod optim;
mod param;

pub use conv::{Conv2d, ConvCache};
pub use linear::{Linear, LinearCache};
pub use norm::{GroupNorm, GroupNormCache};
pub use ops::{
    concat_channels, dropout, global_avg_pool, global_avg_pool_backward, l2_normalize,
    l2_normalize_backward, relu, relu_backward, split_channels, upsample_nearest2x,
    upsample_nearest2x_backward,
};
pub use optim::{Adam, Sgd};
pub use param::{Module, Param};

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Kaiming-normal initialization for a layer with `fan_in` inputs feeding a ReLU.
pub(crate) fn kaiming_normal(rng: &mut impl Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..len).map(|_| normal.sample(rng)).collect()
}

/// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub(crate) fn uniform_fan_in(rng: &mut impl Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}
