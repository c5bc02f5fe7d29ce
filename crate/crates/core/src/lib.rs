//! Push-pull inhibition layers for convolutional networks, the training
//! primitives they need, and a harness for measuring robustness to input
//! noise.
//!
//! * [`tensor`], [`ops`], [`optim`]: dense tensors, differentiable
//!   primitives and SGD.
//! * [`pushpull`]: the push-pull layer and its derived pull kernel.
//! * [`model`]: LeNet-5 and wide residual network builders.
//! * [`perturb`]: Gaussian, speckle, contrast and Poisson corruptions.
//! * [`data`]: MNIST IDX and CIFAR binary readers.
//! * [`harness`]: training, evaluation grids, sensitivity sweeps and reports.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod ops;
pub mod optim;
pub mod perturb;
pub mod pushpull;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{build, build_lenet, build_wideresnet, parameter_count, Model, ModelSpec};
pub use optim::{Parameter, SgdConfig};
pub use pushpull::{derive_pull, PushPullConfig, PushPullLayer};
pub use tensor::{Scalar, Tensor};
