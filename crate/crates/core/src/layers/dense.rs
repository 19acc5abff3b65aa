use crate::error::{Error, Result};
use crate::tensor::{gemm, matmul, Scalar, Tensor};

/// Fully connected layer `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct DenseCtx<T> {
    input: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct DenseGrads<T> {
    pub x: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        match *weight.shape() {
            [_, out] if bias.shape() == [out] => Ok(Dense { weight, bias }),
            _ => Err(Error::shape(format!(
                "dense weight must be [in, out] with bias [out]; got {:?} and {:?}",
                weight.shape(),
                bias.shape()
            ))),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[inputs, outputs])?, Tensor::zeros(&[outputs])?)
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, DenseCtx<T>)> {
        match *x.shape() {
            [_, k] if k == self.inputs() => {}
            _ => {
                return Err(Error::shape(format!(
                    "dense expects [N, {}], got {:?}",
                    self.inputs(),
                    x.shape()
                )))
            }
        }
        let mut y = matmul(x, &self.weight)?;
        let out = self.outputs();
        for row in y.data_mut().chunks_mut(out) {
            for (v, &b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Ok((y, DenseCtx { input: x.clone() }))
    }

    pub fn backward(&self, grad_y: &Tensor<T>, ctx: &DenseCtx<T>) -> Result<DenseGrads<T>> {
        let n = ctx.input.shape()[0];
        let (k, m) = (self.inputs(), self.outputs());
        if grad_y.shape() != [n, m] {
            return Err(Error::shape(format!(
                "dense backward: grad shape {:?}, expected [{n}, {m}]",
                grad_y.shape()
            )));
        }
        // grad_x = grad_y · Wᵀ
        let mut gx = vec![T::zero(); n * k];
        gemm(
            n,
            m,
            k,
            T::one(),
            (grad_y.data(), m, 1),
            (self.weight.data(), 1, m),
            T::zero(),
            &mut gx,
            k,
            1,
        );
        // grad_w = xᵀ · grad_y
        let mut gw = vec![T::zero(); k * m];
        gemm(
            k,
            n,
            m,
            T::one(),
            (ctx.input.data(), 1, k),
            (grad_y.data(), m, 1),
            T::zero(),
            &mut gw,
            m,
            1,
        );
        let mut gb = vec![T::zero(); m];
        for row in grad_y.data().chunks(m) {
            for (b, &g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
        Ok(DenseGrads {
            x: Tensor::from_vec(&[n, k], gx)?,
            weight: Tensor::from_vec(&[k, m], gw)?,
            bias: Tensor::from_vec(&[m], gb)?,
        })
    }
}
