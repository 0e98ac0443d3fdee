//! Dense double-precision tensors with reverse-mode autodiff and Adam.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, FD_STEP};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamSet};
pub use tape::{masked_softmax, AttnMask, Gradients, Tape, Var, LAYER_NORM_EPS, MASK_NEG};
pub use tensor::Tensor;

pub(crate) use tape::segment_mean_kernel;
pub use tape::sigmoid;

use rand::Rng;

/// Uniform init in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data")
}

/// `loss = sum(scale * x)`-style helper used by tests and examples: the
/// dot product of a tensor with fixed weights, reduced to a scalar.
pub fn weighted_sum(tape: &mut Tape<'_>, x: Var, weights: &Tensor) -> crate::Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}
