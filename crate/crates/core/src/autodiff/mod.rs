//! Minimal dense-tensor reverse-mode differentiation: exactly the
//! operator set the segmentation network and the loss zoo need, nothing
//! more. Values are recorded on a [`Tape`]; [`Tape::backward`] consumes
//! the tape and returns gradients for every requested node.

mod check;
mod kernels;
mod tape;
mod tensor;

pub use check::{finite_diff_grad, grad_check, max_rel_err};
pub use kernels::ConvGeom;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

use crate::scalar::Scalar;

/// Raw forward convolution, exposed for throughput probes.
#[doc(hidden)]
pub fn bench_conv_fwd<S: Scalar>(geom: &ConvGeom, x: &[S], w: &[S], b: &[S], out: &mut [S]) {
    kernels::conv2d_fwd(geom, x, w, b, out);
}

/// Raw backward convolution (input + weight + bias), exposed for throughput probes.
#[doc(hidden)]
pub fn bench_conv_bwd<S: Scalar>(
    geom: &ConvGeom,
    x: &[S],
    w: &[S],
    dout: &[S],
    dx: &mut [S],
    dw: &mut [S],
    db: &mut [S],
) {
    kernels::conv2d_bwd_input(geom, w, dout, dx);
    kernels::conv2d_bwd_weight(geom, x, dout, dw);
    kernels::conv2d_bwd_bias(geom, dout, db);
}
