//! Dense tensors, a reverse-mode tape, and the differentiable ops every layer is
//! built from.

pub mod checkpoint;
mod conv;
mod graph;
mod norm;
pub mod ops;
mod params;
mod real;
mod tensor;

pub use conv::{adaptive_avg_pool_tokens, conv2d, conv_out_len, maxpool2d, token_windows, Conv2dSpec};
pub use graph::{Backward, Graph, Var};
pub use norm::{batch_norm, BatchStats, BN_EPS, BN_MOMENTUM};
pub use params::{ParamId, ParamStore, ParamTensor};
pub use real::Real;
pub use tensor::Tensor;
