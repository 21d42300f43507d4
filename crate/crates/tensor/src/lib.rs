//! Dense rank-4 tensors with reverse-mode differentiation of the image kernels used
//! by the octave networks: convolution, transposed convolution, pooling,
//! upsampling, batch normalization, pointwise math and channel concatenation.

mod error;
pub mod fdt1;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
mod ops;
mod parallel;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_module, randomize_biases, GradCheckOptions, GradCheckReport, WithInput};
pub use graph::{BackwardFn, Gradients, Graph, Mode, Var};
pub use kernels::{PoolMode, UpsampleMode};
pub use nn::{apply_buffer_updates, BatchNorm2d, Conv2d, Deconv2d, LeafSet, Module, Param};
pub use ops::Reduce;
pub use optim::{grad_norm, Sgd};
pub use parallel::{set_threads, threads};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};
