use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
}

/// Keeps the forward input; the backward mask is recomputed from its sign.
#[derive(Debug, Clone)]
pub struct ActivationCtx<T> {
    input: Tensor<T>,
}

impl Activation {
    fn negative_slope<T: Scalar>(self) -> T {
        match self {
            Activation::Relu => T::zero(),
            Activation::LeakyRelu { slope } => T::lit(slope),
        }
    }

    pub fn forward<T: Scalar>(self, x: &Tensor<T>) -> (Tensor<T>, ActivationCtx<T>) {
        let slope = self.negative_slope::<T>();
        let y = x.map(|v| if v > T::zero() { v } else { slope * v });
        (y, ActivationCtx { input: x.clone() })
    }

    pub fn backward<T: Scalar>(self, grad_y: &Tensor<T>, ctx: &ActivationCtx<T>) -> Result<Tensor<T>> {
        if grad_y.shape() != ctx.input.shape() {
            return Err(Error::shape(format!(
                "activation backward: grad shape {:?} differs from forward {:?}",
                grad_y.shape(),
                ctx.input.shape()
            )));
        }
        let slope = self.negative_slope::<T>();
        let data = grad_y
            .data()
            .iter()
            .zip(ctx.input.data())
            .map(|(&g, &x)| if x > T::zero() { g } else { slope * g })
            .collect();
        Tensor::from_vec(grad_y.shape(), data)
    }
}
