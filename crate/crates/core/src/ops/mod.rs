//! Forward and backward kernels.
//!
//! Every kernel fixes its accumulation order (row-major outputs, ascending
//! reduction index), so identical inputs produce bit-identical outputs.
//! Kernels are generic over [`MaddCounter`]; the no-op counter compiles away,
//! the tallying counter literally counts one increment per multiply-add and
//! backs the instrumented execution mode.

mod activation;
mod batchnorm;
mod conv;
mod loss;
mod matmul;
mod pool;

pub use activation::{add, relu, relu_backward, softmax_rows, softmax_rows_backward};
pub use batchnorm::{
    batchnorm_backward, batchnorm_eval, batchnorm_train, BnCache, BnGrads, BN_EPS, BN_MOMENTUM,
};
pub use conv::{
    conv1x1_grads, conv2d, conv2d_backward, conv2d_counted, conv_out_dim, depthwise_conv2d,
    depthwise_conv2d_backward, depthwise_conv2d_counted, pad_input, ConvGrads,
};
pub use loss::{accuracy_count, argmax_row, cross_entropy, softmax_cross_entropy_loss_only};
pub use matmul::{matmul, matmul_counted, matmul_grads};
pub use pool::{
    avg_pool, avg_pool_backward, global_avg_pool, global_avg_pool_backward,
};

/// Observer invoked once per fused multiply-add inside a kernel's innermost
/// loop.
pub trait MaddCounter {
    fn madd(&mut self);
}

/// Zero-cost counter for the normal execution path.
pub struct NoCount;

impl MaddCounter for NoCount {
    #[inline(always)]
    fn madd(&mut self) {}
}

/// Literal multiply-add tally for instrumented runs.
#[derive(Default)]
pub struct Tally(pub u64);

impl MaddCounter for Tally {
    #[inline(always)]
    fn madd(&mut self) {
        self.0 += 1;
    }
}
