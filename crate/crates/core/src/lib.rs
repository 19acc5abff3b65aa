//! Volumetric residual CNN engine and the lung-CT classification pipeline
//! built on it: preprocessing, data I/O and balancing, training with
//! plateau decay and early stopping, evaluation and transfer learning.

pub mod dataio;
pub mod error;
pub mod harness;
pub mod layers;
pub mod model;
pub mod optim;
pub mod preprocess;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ParamSet};
pub use tensor::{Scalar, Shape5, Tensor};
