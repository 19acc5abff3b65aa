//! Loss, regularization, Adam and the epoch-level controllers (plateau decay
//! and early stopping).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ParamKind;
use crate::model::{NamedParam, NamedParamMut, ParamSet};
use crate::tensor::{Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
pub const PLATEAU_FACTOR: f64 = 0.9;
pub const PLATEAU_PATIENCE: usize = 5;
pub const PLATEAU_MIN_DELTA: f64 = 1e-4;
pub const EARLY_STOP_PATIENCE: usize = 10;

/// Mean binary cross-entropy on raw logits and its gradient.
///
/// Uses `max(z, 0) - y·z + ln(1 + e^-|z|)`, which never overflows.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, labels: &[T]) -> Result<(T, Tensor<T>)> {
    let n = logits.len();
    if n != labels.len() || logits.shape()[0] != n {
        return Err(Error::shape(format!(
            "bce: logits {:?} do not pair with {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != T::zero() && y != T::one()) {
        return Err(Error::Validation(format!("bce label must be 0 or 1, got {bad}")));
    }
    let count = T::from_usize(n).expect("batch size fits");
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(n);
    for (&z, &y) in logits.data().iter().zip(labels) {
        loss += z.max(T::zero()) - y * z + (-z.abs()).exp().ln_1p();
        grad.push((sigmoid(z) - y) / count);
    }
    Ok((loss / count, Tensor::from_vec(logits.shape(), grad)?))
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `lambda · Σ‖w‖²` over weight-kind parameters, with the matching gradient
/// `2·lambda·w` for each of them. Biases and batch-norm affine terms are
/// left out of both.
pub fn l2_penalty<T: Scalar>(params: &[NamedParam<'_, T>], lambda: f64) -> Result<(T, ParamSet<T>)> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::config(format!(
            "l2 lambda must be finite and >= 0, got {lambda}"
        )));
    }
    let lam = T::lit(lambda);
    let two_lam = T::lit(2.0 * lambda);
    let mut penalty = T::zero();
    let mut grads = ParamSet::new();
    for p in params.iter().filter(|p| p.kind == ParamKind::Weight) {
        penalty += p.tensor.sum_squares();
        grads.insert(p.name.clone(), p.tensor.map(|w| two_lam * w));
    }
    Ok((lam * penalty, grads))
}

/// Adds `extra` into `grads` key by key.
pub fn accumulate<T: Scalar>(grads: &mut ParamSet<T>, extra: &ParamSet<T>) -> Result<()> {
    for (name, g) in extra.iter() {
        let slot = grads
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("no gradient slot for `{name}`")))?;
        slot.axpy(T::one(), g)?;
    }
    Ok(())
}

/// Adam moments and step count. Moments are created on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        AdamState {
            m: ParamSet::new(),
            v: ParamSet::new(),
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        }
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Scalar>(
    params: &mut [NamedParamMut<'_, T>],
    grads: &ParamSet<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::config(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() || params.iter().any(|p| !grads.contains(&p.name)) {
        return Err(Error::State(
            "adam: parameter and gradient registries have different keys".into(),
        ));
    }
    if state.t == 0 && state.m.is_empty() {
        for p in params.iter() {
            state.m.insert(p.name.clone(), Tensor::zeros_like(p.tensor));
            state.v.insert(p.name.clone(), Tensor::zeros_like(p.tensor));
        }
    }
    if state.m.len() != params.len()
        || state.v.len() != params.len()
        || params
            .iter()
            .any(|p| !state.m.contains(&p.name) || !state.v.contains(&p.name))
    {
        return Err(Error::State(
            "adam: optimizer state does not match the parameters".into(),
        ));
    }
    for p in params.iter() {
        let g = grads.get(&p.name).expect("checked");
        let shape = p.tensor.shape();
        if g.shape() != shape
            || state.m.get(&p.name).expect("checked").shape() != shape
            || state.v.get(&p.name).expect("checked").shape() != shape
        {
            return Err(Error::State(format!("adam: shape mismatch for `{}`", p.name)));
        }
    }

    state.t += 1;
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let (c1, c2) = (T::lit(1.0 - state.beta1), T::lit(1.0 - state.beta2));
    let bc1 = T::lit(1.0 - state.beta1.powi(t));
    let bc2 = T::lit(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::lit(lr), T::lit(state.epsilon));
    for p in params.iter_mut() {
        let g = grads.get(&p.name).expect("checked").data();
        let m = state.m.get_mut(&p.name).expect("checked").data_mut();
        let v = state.v.get_mut(&p.name).expect("checked").data_mut();
        for (((w, &g), m), v) in p.tensor.data_mut().iter_mut().zip(g).zip(m).zip(v) {
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
        }
    }
    Ok(())
}

fn check_finite(val_loss: f64) -> Result<()> {
    if val_loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("validation loss is {val_loss}")))
    }
}

/// Multiplies the learning rate by `factor` once the validation loss has
/// failed to improve by `min_delta` for more than `patience` epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub current_lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub best_metric: f64,
    pub epochs_since_improvement: usize,
}

impl LrSchedule {
    pub fn new(lr: f64) -> Result<Self> {
        Self::with(lr, PLATEAU_FACTOR, PLATEAU_PATIENCE, PLATEAU_MIN_DELTA)
    }

    pub fn with(lr: f64, factor: f64, patience: usize, min_delta: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::config(format!(
                "plateau factor must lie in (0, 1), got {factor}"
            )));
        }
        if !(min_delta >= 0.0) {
            return Err(Error::config("plateau min_delta must be >= 0"));
        }
        Ok(LrSchedule {
            current_lr: lr,
            factor,
            patience,
            min_delta,
            best_metric: f64::INFINITY,
            epochs_since_improvement: 0,
        })
    }

    /// Feeds one epoch's validation loss; returns whether the rate decayed.
    pub fn update(&mut self, val_loss: f64) -> Result<bool> {
        check_finite(val_loss)?;
        if val_loss < self.best_metric - self.min_delta {
            self.best_metric = val_loss;
            self.epochs_since_improvement = 0;
            return Ok(false);
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement > self.patience {
            self.current_lr *= self.factor;
            self.epochs_since_improvement = 0;
            return Ok(true);
        }
        Ok(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopDecision {
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_delta: f64,
    pub best_val_loss: f64,
    pub epochs_since_best: usize,
}

impl EarlyStop {
    pub fn new(patience: usize, min_delta: f64) -> Result<Self> {
        if patience == 0 {
            return Err(Error::config("early-stop patience must be >= 1"));
        }
        if !(min_delta >= 0.0) {
            return Err(Error::config("early-stop min_delta must be >= 0"));
        }
        Ok(EarlyStop {
            patience,
            min_delta,
            best_val_loss: f64::INFINITY,
            epochs_since_best: 0,
        })
    }

    pub fn check(&mut self, val_loss: f64) -> Result<StopDecision> {
        check_finite(val_loss)?;
        if val_loss < self.best_val_loss - self.min_delta {
            self.best_val_loss = val_loss;
            self.epochs_since_best = 0;
        } else {
            self.epochs_since_best += 1;
        }
        Ok(if self.epochs_since_best > self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        })
    }
}
