//! Forward and backward kernels shared by the autodiff tape and the
//! tape-free inference path.

pub mod conv;
pub mod elementwise;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod pool;

pub use conv::{conv2d, conv2d_backward, conv2d_macs, ConvGeometry};
pub use elementwise::{relu, relu_backward, shortcut_pad, shortcut_pad_backward};
pub use linear::{dense, dense_backward, dense_macs};
pub use loss::{softmax, softmax_cross_entropy, softmax_cross_entropy_backward};
pub use norm::{batchnorm, batchnorm_backward, NormCache, NormMode, RunningStats};
pub use pool::{
    global_avg_pool, global_avg_pool_backward, maxpool2d, maxpool2d_backward, PoolGeometry,
};
