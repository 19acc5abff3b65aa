//! Forward and backward passes for every layer of the network.
//!
//! Each layer's `forward` is pure: it returns the output together with a
//! context holding whatever its `backward` needs. Batch-norm running
//! statistics are folded in separately through `update_running`.

mod activation;
mod batchnorm;
mod conv;
mod dense;
mod pool;
mod unit;
mod voxres;

pub use activation::{Activation, ActivationCtx, DEFAULT_LEAKY_SLOPE};
pub use batchnorm::{BatchNorm3d, BatchNormCtx, BatchNormGrads, DEFAULT_EPSILON, DEFAULT_MOMENTUM};
pub use conv::{Algorithm, Conv3d, Conv3dCtx, Conv3dGrads, Stride, KERNEL};
pub use dense::{Dense, DenseCtx, DenseGrads};
pub use pool::{GlobalAvgPool3d, PoolCtx};
pub use unit::{ConvUnit, ConvUnitCtx};
pub use voxres::{VoxRes, VoxResCtx};

use crate::tensor::Tensor;

/// What a trainable tensor is, which decides whether L2 applies to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

/// Parameter gradients keyed by the parameter's local name.
pub type LocalGrads<T> = Vec<(&'static str, Tensor<T>)>;
