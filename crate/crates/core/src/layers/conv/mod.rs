//! 3×3×3 convolution with one voxel of zero padding on every side.
//!
//! Two kernels compute the same map: a row-wise direct loop and a lowering
//! to GEMM. [`Algorithm::select`] picks one from the input channel count alone, so
//! a given layer always runs the same code.

mod direct;
mod lowered;

use crate::error::{Error, Result};
use crate::tensor::{pad3d, Scalar, Shape5, Tensor};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL * KERNEL;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Stride {
    One = 1,
    Two = 2,
}

impl Stride {
    pub fn get(self) -> usize {
        self as usize
    }

    /// Output extent with "same" padding: `ceil(extent / stride)`.
    pub fn out_extent(self, extent: usize) -> usize {
        extent.div_ceil(self.get())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Direct,
    Lowered,
}

impl Algorithm {
    /// Lowering only pays for its column copies once the contraction has a
    /// few input channels.
    pub fn select(in_channels: usize) -> Self {
        if in_channels <= DIRECT_MAX_IN {
            Algorithm::Direct
        } else {
            Algorithm::Lowered
        }
    }
}

const DIRECT_MAX_IN: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d<T = f32> {
    /// `[out_ch, in_ch, 3, 3, 3]`
    pub weight: Tensor<T>,
    /// `[out_ch]`
    pub bias: Tensor<T>,
    pub stride: Stride,
}

/// Saved forward state: the zero-padded input.
#[derive(Debug, Clone)]
pub struct Conv3dCtx<T> {
    padded: Tensor<T>,
    input: Shape5,
    output: Shape5,
}

#[derive(Debug, Clone)]
pub struct Conv3dGrads<T> {
    pub x: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv3d<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, stride: Stride) -> Result<Self> {
        match *weight.shape() {
            [o, i, KERNEL, KERNEL, KERNEL] if i > 0 && bias.shape() == [o] => {}
            _ => {
                return Err(Error::shape(format!(
                    "conv3d weight must be [out, in, 3, 3, 3] with bias [out]; got {:?} and {:?}",
                    weight.shape(),
                    bias.shape()
                )))
            }
        }
        Ok(Conv3d { weight, bias, stride })
    }

    pub fn zeros(in_ch: usize, out_ch: usize, stride: Stride) -> Result<Self> {
        Self::new(
            Tensor::zeros(&[out_ch, in_ch, KERNEL, KERNEL, KERNEL])?,
            Tensor::zeros(&[out_ch])?,
            stride,
        )
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_shape(&self, x: Shape5) -> Shape5 {
        Shape5 {
            n: x.n,
            c: self.out_channels(),
            d: self.stride.out_extent(x.d),
            h: self.stride.out_extent(x.h),
            w: self.stride.out_extent(x.w),
        }
    }

    pub fn algorithm(&self) -> Algorithm {
        Algorithm::select(self.in_channels())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Conv3dCtx<T>)> {
        self.forward_with(x, self.algorithm())
    }

    pub fn backward(&self, grad_y: &Tensor<T>, ctx: &Conv3dCtx<T>) -> Result<Conv3dGrads<T>> {
        self.backward_with(grad_y, ctx, self.algorithm())
    }

    pub fn forward_with(&self, x: &Tensor<T>, algo: Algorithm) -> Result<(Tensor<T>, Conv3dCtx<T>)> {
        let s = x.dims5()?;
        if s.c != self.in_channels() {
            return Err(Error::shape(format!(
                "conv3d expects {} input channels, got {}",
                self.in_channels(),
                s.c
            )));
        }
        let out = self.output_shape(s);
        let padded = pad3d(x, [(1, 1); 3], T::zero())?;
        let geom = Geometry::new(s, out, self.stride.get());
        let (w, b, xp) = (self.weight.data(), self.bias.data(), padded.data());
        let y = match algo {
            Algorithm::Direct => direct::forward(&geom, w, b, xp),
            Algorithm::Lowered => lowered::forward(&geom, w, b, xp),
        };
        Ok((
            Tensor::from_vec(&out.dims(), y)?,
            Conv3dCtx {
                padded,
                input: s,
                output: out,
            },
        ))
    }

    pub fn backward_with(&self, grad_y: &Tensor<T>, ctx: &Conv3dCtx<T>, algo: Algorithm) -> Result<Conv3dGrads<T>> {
        let out = ctx.output;
        if grad_y.shape() != out.dims() {
            return Err(Error::shape(format!(
                "conv3d backward: grad shape {:?} differs from forward output {:?}",
                grad_y.shape(),
                out.dims()
            )));
        }
        if ctx.input.c != self.in_channels() || out.c != self.out_channels() {
            return Err(Error::State(
                "conv3d backward: context does not belong to these parameters".into(),
            ));
        }
        let s = ctx.input;
        let geom = Geometry::new(s, out, self.stride.get());

        let mut grad_b = vec![T::zero(); out.c];
        for n in 0..out.n {
            for (o, gb) in grad_b.iter_mut().enumerate() {
                let start = (n * out.c + o) * out.spatial();
                *gb += grad_y.data()[start..start + out.spatial()]
                    .iter()
                    .fold(T::zero(), |a, &v| a + v);
            }
        }

        let (w, gy, xp) = (self.weight.data(), grad_y.data(), ctx.padded.data());
        let (grad_w, grad_xp) = match algo {
            Algorithm::Direct => direct::backward(&geom, w, gy, xp),
            Algorithm::Lowered => lowered::backward(&geom, w, gy, xp),
        };
        Ok(Conv3dGrads {
            x: Tensor::from_vec(&s.dims(), geom.crop(&grad_xp))?,
            weight: Tensor::from_vec(self.weight.shape(), grad_w)?,
            bias: Tensor::from_vec(&[out.c], grad_b)?,
        })
    }
}

/// Padded-volume index arithmetic shared by both kernels.
struct Geometry {
    input: Shape5,
    out: Shape5,
    stride: usize,
    pd: usize,
    ph: usize,
    pw: usize,
}

impl Geometry {
    fn new(input: Shape5, out: Shape5, stride: usize) -> Self {
        Geometry {
            input,
            out,
            stride,
            pd: input.d + 2,
            ph: input.h + 2,
            pw: input.w + 2,
        }
    }

    fn rows(&self) -> usize {
        self.input.c * TAPS
    }

    /// Drops the one-voxel border from a padded gradient.
    fn crop<T: Scalar>(&self, gxp: &[T]) -> Vec<T> {
        let s = self.input;
        let mut out = Vec::with_capacity(s.numel());
        for plane in 0..s.n * s.c {
            let base = plane * self.pd * self.ph * self.pw;
            for z in 0..s.d {
                for y in 0..s.h {
                    let from = base + ((z + 1) * self.ph + y + 1) * self.pw + 1;
                    out.extend_from_slice(&gxp[from..from + s.w]);
                }
            }
        }
        out
    }
}
