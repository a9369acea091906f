//! Dense linear algebra and the encoder with hand-derived gradients.
//!
//! Everything is 64-bit and allocation-simple: a row-major [`DenseMatrix`],
//! a small tanh MLP whose outputs are L2-normalized rows, and an exact
//! reverse pass for the fixed set of training objectives in [`LossSpec`].
//! A central-difference checker ([`finite_diff_grads`]) serves as the oracle
//! for every analytic gradient.

mod encoder;
mod matrix;
mod objective;

pub use encoder::{
    ema_update, sgd_step, EncoderParams, ForwardCache, Gradients, LayerGrad, LinearLayer,
    NORM_FLOOR,
};
pub use matrix::{dot, DenseMatrix};
pub use objective::{compute_loss, compute_loss_and_grads, finite_diff_grads, softmax_rows, LossSpec};
