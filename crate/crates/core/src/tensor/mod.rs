//! Dense tensors, the reverse-mode graph and the layer primitives built on it.
//!
//! Feature maps are laid out as `[batch, height, width, channels]` in row-major
//! order; per-image vectors are `[batch, len]`.

mod graph;
mod init;
mod norm;
mod ops;
mod params;
mod storage;

pub mod gradcheck;

pub use graph::{CustomOp, Graph, Var};
pub use init::{glorot_uniform, Initializer};
pub use norm::{BatchNormState, NormMode, BN_EPSILON, BN_MOMENTUM};
#[allow(unused_imports)]
pub(crate) use ops::sigmoid;
pub use ops::{assemble_patches, partition_patches, resize_coord};
pub use params::{Bindings, Param, ParamId, ParamKind, ParamSet};
pub use storage::Tensor;

#[cfg(test)]
mod tests;
