//! Dense NCHW tensors over a generic float scalar, the convolution and
//! normalization kernels a segmentation network needs, and a small
//! reverse-mode autodiff tape to train with.

pub mod error;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod param;
pub mod scalar;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{dice_terms, Gradients, Graph, Var};
pub use kernels::conv::{Conv2dGeometry, Padding2d};
pub use nn::{apply_buffer_updates, BatchNorm2d, Conv2d, ConvInit, ConvTranspose2d, Forward, GroupNorm};
pub use optim::Adam;
pub use param::{Builder, Init, ParamEntry, ParamId, ParamKind, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
