use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{Activation, ActivationCtx, BatchNorm3d, BatchNormCtx, Conv3d, Conv3dCtx, LocalGrads, ParamKind, Stride};

/// Residual block `y = F(x) + x` with the pre-activation branch
/// `F = conv2 ∘ relu ∘ bn2 ∘ conv1 ∘ relu ∘ bn1`.
///
/// Both convolutions keep the channel count and use stride 1, so the skip
/// connection is a plain identity.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxRes<T = f32> {
    pub bn1: BatchNorm3d<T>,
    pub conv1: Conv3d<T>,
    pub bn2: BatchNorm3d<T>,
    pub conv2: Conv3d<T>,
}

#[derive(Debug, Clone)]
pub struct VoxResCtx<T> {
    pub(crate) bn1: BatchNormCtx<T>,
    act1: ActivationCtx<T>,
    conv1: Conv3dCtx<T>,
    pub(crate) bn2: BatchNormCtx<T>,
    act2: ActivationCtx<T>,
    conv2: Conv3dCtx<T>,
}

impl<T: Scalar> VoxRes<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(VoxRes {
            bn1: BatchNorm3d::new(channels)?,
            conv1: Conv3d::zeros(channels, channels, Stride::One)?,
            bn2: BatchNorm3d::new(channels)?,
            conv2: Conv3d::zeros(channels, channels, Stride::One)?,
        })
    }

    /// Rejects branches that would change channels or extents.
    pub fn validate(&self) -> Result<()> {
        let c = self.bn1.channels();
        let convs = [&self.conv1, &self.conv2];
        if convs
            .iter()
            .any(|conv| conv.in_channels() != c || conv.out_channels() != c || conv.stride != Stride::One)
            || self.bn2.channels() != c
        {
            return Err(Error::config("VoxRes branch must preserve channels and use stride 1"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<(Tensor<T>, VoxResCtx<T>)> {
        self.validate()?;
        let (h, bn1) = self.bn1.forward(x, training)?;
        let (h, act1) = Activation::Relu.forward(&h);
        let (h, conv1) = self.conv1.forward(&h)?;
        let (h, bn2) = self.bn2.forward(&h, training)?;
        let (h, act2) = Activation::Relu.forward(&h);
        let (branch, conv2) = self.conv2.forward(&h)?;
        let y = branch.add(x)?;
        Ok((
            y,
            VoxResCtx {
                bn1,
                act1,
                conv1,
                bn2,
                act2,
                conv2,
            },
        ))
    }

    pub fn backward(&self, grad_y: &Tensor<T>, ctx: &VoxResCtx<T>) -> Result<(Tensor<T>, LocalGrads<T>)> {
        let c2 = self.conv2.backward(grad_y, &ctx.conv2)?;
        let g = Activation::Relu.backward(&c2.x, &ctx.act2)?;
        let b2 = self.bn2.backward(&g, &ctx.bn2)?;
        let c1 = self.conv1.backward(&b2.x, &ctx.conv1)?;
        let g = Activation::Relu.backward(&c1.x, &ctx.act1)?;
        let b1 = self.bn1.backward(&g, &ctx.bn1)?;
        // skip path contributes grad_y unchanged
        let grad_x = b1.x.add(grad_y)?;
        Ok((
            grad_x,
            vec![
                ("bn1.gamma", b1.gamma),
                ("bn1.beta", b1.beta),
                ("conv1.weight", c1.weight),
                ("conv1.bias", c1.bias),
                ("bn2.gamma", b2.gamma),
                ("bn2.beta", b2.beta),
                ("conv2.weight", c2.weight),
                ("conv2.bias", c2.bias),
            ],
        ))
    }

    pub fn params(&self) -> Vec<(&'static str, ParamKind, &Tensor<T>)> {
        vec![
            ("bn1.gamma", ParamKind::BnScale, &self.bn1.gamma),
            ("bn1.beta", ParamKind::BnShift, &self.bn1.beta),
            ("conv1.weight", ParamKind::Weight, &self.conv1.weight),
            ("conv1.bias", ParamKind::Bias, &self.conv1.bias),
            ("bn2.gamma", ParamKind::BnScale, &self.bn2.gamma),
            ("bn2.beta", ParamKind::BnShift, &self.bn2.beta),
            ("conv2.weight", ParamKind::Weight, &self.conv2.weight),
            ("conv2.bias", ParamKind::Bias, &self.conv2.bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, ParamKind, &mut Tensor<T>)> {
        vec![
            ("bn1.gamma", ParamKind::BnScale, &mut self.bn1.gamma),
            ("bn1.beta", ParamKind::BnShift, &mut self.bn1.beta),
            ("conv1.weight", ParamKind::Weight, &mut self.conv1.weight),
            ("conv1.bias", ParamKind::Bias, &mut self.conv1.bias),
            ("bn2.gamma", ParamKind::BnScale, &mut self.bn2.gamma),
            ("bn2.beta", ParamKind::BnShift, &mut self.bn2.beta),
            ("conv2.weight", ParamKind::Weight, &mut self.conv2.weight),
            ("conv2.bias", ParamKind::Bias, &mut self.conv2.bias),
        ]
    }

    pub fn buffers(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("bn1.running_mean", &self.bn1.running_mean),
            ("bn1.running_var", &self.bn1.running_var),
            ("bn2.running_mean", &self.bn2.running_mean),
            ("bn2.running_var", &self.bn2.running_var),
        ]
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("bn1.running_mean", &mut self.bn1.running_mean),
            ("bn1.running_var", &mut self.bn1.running_var),
            ("bn2.running_mean", &mut self.bn2.running_mean),
            ("bn2.running_var", &mut self.bn2.running_var),
        ]
    }

    pub fn update_running(&mut self, ctx: &VoxResCtx<T>) {
        self.bn1.update_running(&ctx.bn1);
        self.bn2.update_running(&ctx.bn2);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn zero_branch_is_exact_identity() {
        let mut block = VoxRes::<f32>::new(4).unwrap();
        block.bn1.gamma.fill(0.0);
        block.bn2.gamma.fill(0.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let data = (0..4 * 64).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let x = Tensor::from_vec(&[1, 4, 4, 4, 4], data).unwrap();
        for training in [true, false] {
            let (y, ctx) = block.forward(&x, training).unwrap();
            assert_eq!(y, x);
            let gy = x.map(|v| v * 0.5 + 1.0);
            let (gx, _) = block.backward(&gy, &ctx).unwrap();
            assert_eq!(gx, gy);
        }
    }

    #[test]
    fn channel_change_is_config_error() {
        let mut block = VoxRes::<f32>::new(2).unwrap();
        block.conv2 = Conv3d::zeros(2, 3, Stride::One).unwrap();
        let x = Tensor::zeros(&[1, 2, 2, 2, 2]).unwrap();
        assert!(matches!(block.forward(&x, true), Err(Error::Config(_))));
        block.conv2 = Conv3d::zeros(2, 2, Stride::Two).unwrap();
        assert!(matches!(block.validate(), Err(Error::Config(_))));
    }
}
