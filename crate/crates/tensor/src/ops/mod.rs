//! Differentiable tensor operations.
//!
//! Every function records onto the given [`Tape`](crate::Tape) and fails
//! with [`TensorError::NonFinite`](crate::TensorError::NonFinite) if its
//! output contains NaN or infinity. Loops run in a fixed row-major order so
//! results are bit-reproducible.

mod conv;
mod elementwise;
mod gemm;
mod layout;
mod linalg;
mod norm;
mod pool;

pub use conv::conv2d;
pub use elementwise::{add, add_channel_bias, mean, mse, mul, scale, silu, sub, sum};
pub use layout::{concat_channels, gather_rows, nchw_to_tokens, reshape, tokens_to_nchw};
pub use linalg::{bmm, bmm_nt, linear, scaled_dot_product_attention, softmax};
pub use norm::group_norm;
pub use pool::{avg_pool2d, upsample_nearest};

use crate::{Result, Tensor, TensorError};

pub(crate) fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(TensorError::shape(op, format!("expected NCHW input, got {s:?}"))),
    }
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}
