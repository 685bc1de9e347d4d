//! Self-contained differentiable-computation core.
//!
//! Everything here is 64-bit and deterministic: a fixed accumulation order
//! is used in every reduction so repeated runs with the same seed are
//! bit-identical. The differentiation [`Tape`] is rebuilt per loss
//! evaluation; there are no persistent graphs.

mod adam;
mod gaussian;
mod mlp;
mod params;
mod tape;
mod tensor;

pub mod check;

pub use adam::{adam_step, AdamConfig};
pub use gaussian::{
    gaussian_log_prob_sum, kl_diag_gaussians, kl_to_std_normal_sum, log_prob_slice, reparam,
    split_gaussian_head, split_gaussian_head_clamped, tanh_squash, tanh_squash_rows, DiagGaussian,
    LOG_STD_MAX, LOG_STD_MIN,
};
pub use mlp::{Activation, MlpSpec, OutputActivation};
pub use params::{Grads, ParamEntry, ParameterSet};
pub use tape::{RawGrads, Tape, Var};
pub use tensor::Tensor;
