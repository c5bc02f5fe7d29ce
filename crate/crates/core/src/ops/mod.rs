//! Differentiable primitives. Each forward function has a matching
//! `*_backward` that returns exact adjoints for the saved forward inputs.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod pool;

pub use activation::{relu, relu_backward};
pub use batchnorm::{batch_norm_backward, batch_norm_eval, batch_norm_train, BatchNormContext, BatchNormGrads};
pub use conv::{conv2d, conv2d_backward, ConvGrads};
pub use linear::{linear, linear_backward, LinearGrads};
pub use loss::softmax_cross_entropy;
pub use pool::{global_avg_pool, global_avg_pool_backward, maxpool2d, maxpool2d_backward, MaxPoolOutput};
