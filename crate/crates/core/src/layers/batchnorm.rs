use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape5, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over batch and spatial axes.
///
/// Running statistics move as `new = (1 - momentum) * old + momentum * batch`
/// using the biased batch variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm3d<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub epsilon: T,
}

#[derive(Debug, Clone)]
pub struct BatchNormCtx<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
    pub(crate) batch_mean: Vec<T>,
    pub(crate) batch_var: Vec<T>,
    pub(crate) training: bool,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T> {
    pub x: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> BatchNorm3d<T> {
    /// Identity-initialized layer: gamma 1, beta 0, running mean 0, var 1.
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNorm3d {
            gamma: Tensor::full(&[channels], T::one())?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], T::one())?,
            momentum: T::lit(DEFAULT_MOMENTUM),
            epsilon: T::lit(DEFAULT_EPSILON),
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check_input(&self, s: Shape5) -> Result<()> {
        if s.c != self.channels() {
            return Err(Error::shape(format!(
                "batchnorm has {} channels, input has {}",
                self.channels(),
                s.c
            )));
        }
        if !(self.epsilon > T::zero()) {
            return Err(Error::config("batchnorm epsilon must be positive"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<(Tensor<T>, BatchNormCtx<T>)> {
        let s = x.dims5()?;
        self.check_input(s)?;
        let spatial = s.spatial();
        let count = s.n * spatial;
        let (mean, var) = if training {
            if count < 2 {
                return Err(Error::DegenerateBatch { channel: 0, count });
            }
            channel_moments(x.data(), s)
        } else {
            (self.running_mean.data().to_vec(), self.running_var.data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + self.epsilon).sqrt()).collect();

        let mut x_hat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for n in 0..s.n {
            for c in 0..s.c {
                let start = (n * s.c + c) * spatial;
                let (g, b) = (self.gamma.data()[c], self.beta.data()[c]);
                let (m, is) = (mean[c], inv_std[c]);
                for i in start..start + spatial {
                    let h = (x.data()[i] - m) * is;
                    x_hat[i] = h;
                    y[i] = g * h + b;
                }
            }
        }
        Ok((
            Tensor::from_vec(x.shape(), y)?,
            BatchNormCtx {
                x_hat: Tensor::from_vec(x.shape(), x_hat)?,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                training,
            },
        ))
    }

    pub fn backward(&self, grad_y: &Tensor<T>, ctx: &BatchNormCtx<T>) -> Result<BatchNormGrads<T>> {
        if grad_y.shape() != ctx.x_hat.shape() {
            return Err(Error::shape(format!(
                "batchnorm backward: grad shape {:?} differs from forward {:?}",
                grad_y.shape(),
                ctx.x_hat.shape()
            )));
        }
        let s = grad_y.dims5()?;
        self.check_input(s)?;
        let spatial = s.spatial();
        let m = T::from_usize(s.n * spatial).expect("count fits");

        let mut grad_gamma = vec![T::zero(); s.c];
        let mut grad_beta = vec![T::zero(); s.c];
        for n in 0..s.n {
            for c in 0..s.c {
                let start = (n * s.c + c) * spatial;
                for i in start..start + spatial {
                    let g = grad_y.data()[i];
                    grad_beta[c] += g;
                    grad_gamma[c] += g * ctx.x_hat.data()[i];
                }
            }
        }

        let mut grad_x = vec![T::zero(); grad_y.len()];
        for n in 0..s.n {
            for c in 0..s.c {
                let start = (n * s.c + c) * spatial;
                let gamma = self.gamma.data()[c];
                let is = ctx.inv_std[c];
                if ctx.training {
                    // dx = gamma*inv_std/M * (M*dy - sum(dy) - x_hat*sum(dy*x_hat))
                    let scale = gamma * is / m;
                    for i in start..start + spatial {
                        grad_x[i] = scale * (m * grad_y.data()[i] - grad_beta[c] - ctx.x_hat.data()[i] * grad_gamma[c]);
                    }
                } else {
                    for i in start..start + spatial {
                        grad_x[i] = gamma * is * grad_y.data()[i];
                    }
                }
            }
        }
        Ok(BatchNormGrads {
            x: Tensor::from_vec(grad_y.shape(), grad_x)?,
            gamma: Tensor::from_vec(&[s.c], grad_gamma)?,
            beta: Tensor::from_vec(&[s.c], grad_beta)?,
        })
    }

    /// Folds the batch statistics of a training-mode forward into the
    /// running estimates. Inference contexts are ignored.
    pub fn update_running(&mut self, ctx: &BatchNormCtx<T>) {
        if !ctx.training {
            return;
        }
        let mom = self.momentum;
        let keep = T::one() - mom;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&ctx.batch_mean) {
            *r = keep * *r + mom * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&ctx.batch_var) {
            *r = keep * *r + mom * b;
        }
    }
}

/// Two-pass per-channel mean and biased variance over batch and space.
fn channel_moments<T: Scalar>(x: &[T], s: Shape5) -> (Vec<T>, Vec<T>) {
    let spatial = s.spatial();
    let count = T::from_usize(s.n * spatial).expect("count fits");
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            let start = (n * s.c + c) * spatial;
            acc = x[start..start + spatial].iter().fold(acc, |a, &v| a + v);
        }
        let mu = acc / count;
        let mut sq = T::zero();
        for n in 0..s.n {
            let start = (n * s.c + c) * spatial;
            sq = x[start..start + spatial].iter().fold(sq, |a, &v| {
                let d = v - mu;
                a + d * d
            });
        }
        mean[c] = mu;
        var[c] = sq / count;
    }
    (mean, var)
}
