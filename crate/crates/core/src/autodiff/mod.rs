//! Minimal reverse-mode differentiation over dense, convolutional and
//! normalization layers, with masks honoured on every pass.

pub mod adam;
pub mod categorical;
pub mod checkpoint;
pub mod graph;
pub mod kernels;
pub mod mixing;
pub mod param;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use categorical::Categorical;
pub use graph::{Graph, SurrogateBatch, Var};
pub use kernels::{forward_conv2d, forward_dense, layer_norm, Activation, LayerSpec, LAYER_NORM_EPS};
pub use param::{MaskedParam, ParamId, ParamInfo, ParamKind, ParamStore};
pub use tensor::Tensor;
