use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

use super::{Activation, ActivationCtx, BatchNorm3d, BatchNormCtx, Conv3d, Conv3dCtx, LocalGrads, ParamKind, Stride};

/// Convolution followed by batch normalization and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit<T = f32> {
    pub conv: Conv3d<T>,
    pub bn: BatchNorm3d<T>,
}

#[derive(Debug, Clone)]
pub struct ConvUnitCtx<T> {
    conv: Conv3dCtx<T>,
    pub(crate) bn: BatchNormCtx<T>,
    act: ActivationCtx<T>,
}

impl<T: Scalar> ConvUnit<T> {
    pub fn new(in_ch: usize, out_ch: usize, stride: Stride) -> Result<Self> {
        Ok(ConvUnit {
            conv: Conv3d::zeros(in_ch, out_ch, stride)?,
            bn: BatchNorm3d::new(out_ch)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<(Tensor<T>, ConvUnitCtx<T>)> {
        let (h, conv) = self.conv.forward(x)?;
        let (h, bn) = self.bn.forward(&h, training)?;
        let (y, act) = Activation::Relu.forward(&h);
        Ok((y, ConvUnitCtx { conv, bn, act }))
    }

    pub fn backward(&self, grad_y: &Tensor<T>, ctx: &ConvUnitCtx<T>) -> Result<(Tensor<T>, LocalGrads<T>)> {
        let g = Activation::Relu.backward(grad_y, &ctx.act)?;
        let bn = self.bn.backward(&g, &ctx.bn)?;
        let conv = self.conv.backward(&bn.x, &ctx.conv)?;
        Ok((
            conv.x,
            vec![
                ("conv.weight", conv.weight),
                ("conv.bias", conv.bias),
                ("bn.gamma", bn.gamma),
                ("bn.beta", bn.beta),
            ],
        ))
    }

    pub fn params(&self) -> Vec<(&'static str, ParamKind, &Tensor<T>)> {
        vec![
            ("conv.weight", ParamKind::Weight, &self.conv.weight),
            ("conv.bias", ParamKind::Bias, &self.conv.bias),
            ("bn.gamma", ParamKind::BnScale, &self.bn.gamma),
            ("bn.beta", ParamKind::BnShift, &self.bn.beta),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, ParamKind, &mut Tensor<T>)> {
        vec![
            ("conv.weight", ParamKind::Weight, &mut self.conv.weight),
            ("conv.bias", ParamKind::Bias, &mut self.conv.bias),
            ("bn.gamma", ParamKind::BnScale, &mut self.bn.gamma),
            ("bn.beta", ParamKind::BnShift, &mut self.bn.beta),
        ]
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("bn.running_mean", &mut self.bn.running_mean),
            ("bn.running_var", &mut self.bn.running_var),
        ]
    }

    pub fn buffers(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("bn.running_mean", &self.bn.running_mean),
            ("bn.running_var", &self.bn.running_var),
        ]
    }

    pub fn update_running(&mut self, ctx: &ConvUnitCtx<T>) {
        self.bn.update_running(&ctx.bn);
    }
}
