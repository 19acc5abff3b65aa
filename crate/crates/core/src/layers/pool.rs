use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape5, Tensor};

/// Mean over all voxels of each channel: `[N,C,D,H,W] -> [N,C]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GlobalAvgPool3d;

#[derive(Debug, Clone)]
pub struct PoolCtx {
    input: Shape5,
}

impl GlobalAvgPool3d {
    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, PoolCtx)> {
        let s = x.dims5()?;
        let count = T::from_usize(s.spatial()).expect("count fits");
        let data = x
            .data()
            .chunks(s.spatial())
            .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) / count)
            .collect();
        Ok((Tensor::from_vec(&[s.n, s.c], data)?, PoolCtx { input: s }))
    }

    pub fn backward<T: Scalar>(&self, grad_y: &Tensor<T>, ctx: &PoolCtx) -> Result<Tensor<T>> {
        let s = ctx.input;
        if grad_y.shape() != [s.n, s.c] {
            return Err(Error::shape(format!(
                "pool backward: grad shape {:?}, expected [{}, {}]",
                grad_y.shape(),
                s.n,
                s.c
            )));
        }
        let count = T::from_usize(s.spatial()).expect("count fits");
        let mut out = Vec::with_capacity(s.numel());
        for &g in grad_y.data() {
            out.extend(std::iter::repeat_n(g / count, s.spatial()));
        }
        Tensor::from_vec(&s.dims(), out)
    }
}
