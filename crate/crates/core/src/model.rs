//! The residual volumetric classifier: an ordered list of named units with a
//! stable parameter registry.
//!
//! Layer sequence for `stages = S`:
//!
//! ```text
//! stem1       conv(initial, s1) + BN + ReLU
//! stem2       conv(initial, s2) + BN + ReLU
//! transition  conv(main, s1)    + BN + ReLU
//! stage{k}    VoxRes, VoxRes, conv(main, s2) + BN + ReLU     for k in 1..=S
//! pool        global average pool -> [N, main]
//! fc          dense(main -> fc_width) + leaky ReLU
//! out         dense(fc_width -> 1), raw logit
//! ```

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    Activation, ActivationCtx, BatchNorm3d, ConvUnit, ConvUnitCtx, Dense, DenseCtx, GlobalAvgPool3d, LocalGrads,
    ParamKind, PoolCtx, Stride, VoxRes, VoxResCtx, DEFAULT_LEAKY_SLOPE,
};
use crate::tensor::{Scalar, Shape5, Tensor};

/// Unit name of the final logit layer.
pub const OUTPUT_UNIT: &str = "out";
/// Unit name of the hidden fully connected layer.
pub const HIDDEN_UNIT: &str = "fc";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_shape: Shape5,
    pub initial_filters: usize,
    pub main_filters: usize,
    pub stages: usize,
    pub fc_width: usize,
    pub output_units: usize,
    pub l2_lambda: f64,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_shape: Shape5 {
                n: 1,
                c: 1,
                d: 110,
                h: 200,
                w: 200,
            },
            initial_filters: 32,
            main_filters: 64,
            stages: 3,
            fc_width: 64,
            output_units: 1,
            l2_lambda: 1e-4,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages < 1 {
            return Err(Error::config("stages must be >= 1"));
        }
        if self.initial_filters == 0 || self.main_filters == 0 || self.fc_width == 0 {
            return Err(Error::config("filter counts and fc_width must be positive"));
        }
        if self.output_units != 1 {
            return Err(Error::config("binary classifier needs exactly one output unit"));
        }
        if !(self.l2_lambda >= 0.0) || !self.leaky_slope.is_finite() {
            return Err(Error::config("l2_lambda must be >= 0 and leaky_slope finite"));
        }
        Shape5::new(
            self.input_shape.n,
            self.input_shape.c,
            self.input_shape.d,
            self.input_shape.h,
            self.input_shape.w,
        )?;
        self.prepool_extent().map(|_| ())
    }

    /// Spatial extent entering the global pool, after `stages + 1` ceil-halvings.
    ///
    /// Every stride-2 convolution must see at least 2 voxels per axis;
    /// otherwise the reduction would be a no-op and the configuration is
    /// rejected.
    pub fn prepool_extent(&self) -> Result<[usize; 3]> {
        let mut ext = [self.input_shape.d, self.input_shape.h, self.input_shape.w];
        for reduction in 0..=self.stages {
            if ext.iter().any(|&e| e < 2) {
                return Err(Error::config(format!(
                    "input extent {:?} collapses to {:?} before stride-2 reduction {}",
                    [self.input_shape.d, self.input_shape.h, self.input_shape.w],
                    ext,
                    reduction + 1
                )));
            }
            ext = ext.map(|e| Stride::Two.out_extent(e));
        }
        Ok(ext)
    }
}

/// Named tensors in deterministic (sorted) order: gradients, optimizer
/// moments and checkpoint payloads all use this.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T = f32>(BTreeMap<String, Tensor<T>>);

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet(BTreeMap::new())
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.0.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.0.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.0.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.0.iter_mut()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet(self.0.iter().map(|(k, v)| (k.clone(), v.cast())).collect())
    }
}

impl<T> IntoIterator for ParamSet<T> {
    type Item = (String, Tensor<T>);
    type IntoIter = std::collections::btree_map::IntoIter<String, Tensor<T>>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.into_iter()
    }
}

impl<T> FromIterator<(String, Tensor<T>)> for ParamSet<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        ParamSet(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Unit<T> {
    Conv(ConvUnit<T>),
    Res(VoxRes<T>),
    Pool,
    Dense { dense: Dense<T>, act: Option<Activation> },
}

#[derive(Debug, Clone)]
enum UnitCtx<T> {
    Conv(ConvUnitCtx<T>),
    Res(VoxResCtx<T>),
    Pool(PoolCtx),
    Dense(DenseCtx<T>, Option<ActivationCtx<T>>),
}

/// Everything a forward pass saved for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ModelCtx<T> {
    training: bool,
    units: Vec<UnitCtx<T>>,
    batch: usize,
}

impl<T> ModelCtx<T> {
    pub fn training(&self) -> bool {
        self.training
    }
}

/// One registered trainable tensor.
#[derive(Debug)]
pub struct NamedParam<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: &'a Tensor<T>,
}

#[derive(Debug)]
pub struct NamedParamMut<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: &'a mut Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    config: ModelConfig,
    units: Vec<(String, Unit<T>)>,
}

impl<T: Scalar> Model<T> {
    /// Builds the network and He-initializes every weight from `config.seed`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        let mut model = Self::build_zeroed(config)?;
        model.initialize();
        Ok(model)
    }

    /// Same topology with all weights zero (biases zero, BN identity).
    pub fn build_zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (f0, f1) = (config.initial_filters, config.main_filters);
        let mut units = vec![
            (
                "stem1".to_string(),
                Unit::Conv(ConvUnit::new(config.input_shape.c, f0, Stride::One)?),
            ),
            ("stem2".to_string(), Unit::Conv(ConvUnit::new(f0, f0, Stride::Two)?)),
            (
                "transition".to_string(),
                Unit::Conv(ConvUnit::new(f0, f1, Stride::One)?),
            ),
        ];
        for s in 1..=config.stages {
            units.push((format!("stage{s}.res1"), Unit::Res(VoxRes::new(f1)?)));
            units.push((format!("stage{s}.res2"), Unit::Res(VoxRes::new(f1)?)));
            units.push((
                format!("stage{s}.down"),
                Unit::Conv(ConvUnit::new(f1, f1, Stride::Two)?),
            ));
        }
        units.push(("pool".to_string(), Unit::Pool));
        units.push((
            "fc".to_string(),
            Unit::Dense {
                dense: Dense::zeros(f1, config.fc_width)?,
                act: Some(Activation::LeakyRelu {
                    slope: config.leaky_slope,
                }),
            },
        ));
        units.push((
            "out".to_string(),
            Unit::Dense {
                dense: Dense::zeros(config.fc_width, config.output_units)?,
                act: None,
            },
        ));
        Ok(Model { config, units })
    }

    fn initialize(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        for p in self.parameters_mut() {
            if p.kind != ParamKind::Weight {
                continue;
            }
            // Dense weights are [in, out]; conv weights are [out, in, k, k, k].
            let fan_in: usize = match p.tensor.shape() {
                [fan_in, _] => *fan_in,
                shape => shape[1..].iter().product(),
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in p.tensor.data_mut() {
                *v = T::lit(normal.sample(&mut rng));
            }
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<(Tensor<T>, ModelCtx<T>)> {
        let s = x.dims5()?;
        if s.c != self.config.input_shape.c {
            return Err(Error::shape(format!(
                "model expects {} input channel(s), got {}",
                self.config.input_shape.c, s.c
            )));
        }
        let mut h = x.clone();
        let mut ctxs = Vec::with_capacity(self.units.len());
        for (_, unit) in &self.units {
            let (next, ctx) = match unit {
                Unit::Conv(u) => {
                    let (y, c) = u.forward(&h, training)?;
                    (y, UnitCtx::Conv(c))
                }
                Unit::Res(u) => {
                    let (y, c) = u.forward(&h, training)?;
                    (y, UnitCtx::Res(c))
                }
                Unit::Pool => {
                    let (y, c) = GlobalAvgPool3d.forward(&h)?;
                    (y, UnitCtx::Pool(c))
                }
                Unit::Dense { dense, act } => {
                    let (y, c) = dense.forward(&h)?;
                    match act {
                        Some(a) => {
                            let (y, ac) = a.forward(&y);
                            (y, UnitCtx::Dense(c, Some(ac)))
                        }
                        None => (y, UnitCtx::Dense(c, None)),
                    }
                }
            };
            h = next;
            ctxs.push(ctx);
        }
        Ok((
            h,
            ModelCtx {
                training,
                units: ctxs,
                batch: s.n,
            },
        ))
    }

    /// Inference-mode logits without keeping backward state.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x, false)?.0)
    }

    /// Gradients of `Σ grad_logits ⊙ logits` for every registered parameter.
    pub fn backward(&self, ctx: &ModelCtx<T>, grad_logits: &Tensor<T>) -> Result<ParamSet<T>> {
        if !ctx.training {
            return Err(Error::State(
                "backward needs contexts from a training-mode forward".into(),
            ));
        }
        if ctx.units.len() != self.units.len() {
            return Err(Error::State(format!(
                "context has {} units, model has {}",
                ctx.units.len(),
                self.units.len()
            )));
        }
        if grad_logits.shape() != [ctx.batch, self.config.output_units] {
            return Err(Error::shape(format!(
                "grad_logits shape {:?}, expected [{}, {}]",
                grad_logits.shape(),
                ctx.batch,
                self.config.output_units
            )));
        }
        let mut grads = ParamSet::new();
        let mut g = grad_logits.clone();
        for ((name, unit), uctx) in self.units.iter().zip(&ctx.units).rev() {
            let (gx, local): (Tensor<T>, LocalGrads<T>) = match (unit, uctx) {
                (Unit::Conv(u), UnitCtx::Conv(c)) => u.backward(&g, c)?,
                (Unit::Res(u), UnitCtx::Res(c)) => u.backward(&g, c)?,
                (Unit::Pool, UnitCtx::Pool(c)) => (GlobalAvgPool3d.backward(&g, c)?, Vec::new()),
                (Unit::Dense { dense, act }, UnitCtx::Dense(c, ac)) => {
                    let g_pre = match (act, ac) {
                        (Some(a), Some(ac)) => a.backward(&g, ac)?,
                        (None, None) => g.clone(),
                        _ => return Err(Error::State(format!("activation context mismatch at `{name}`"))),
                    };
                    let dg = dense.backward(&g_pre, c)?;
                    (dg.x, vec![("weight", dg.weight), ("bias", dg.bias)])
                }
                _ => return Err(Error::State(format!("context kind mismatch at `{name}`"))),
            };
            for (local_name, t) in local {
                grads.insert(format!("{name}.{local_name}"), t);
            }
            g = gx;
        }
        Ok(grads)
    }

    /// Folds batch statistics from a training forward into BN running stats.
    pub fn update_running_stats(&mut self, ctx: &ModelCtx<T>) -> Result<()> {
        if ctx.units.len() != self.units.len() {
            return Err(Error::State("context does not match model".into()));
        }
        for ((_, unit), uctx) in self.units.iter_mut().zip(&ctx.units) {
            match (unit, uctx) {
                (Unit::Conv(u), UnitCtx::Conv(c)) => u.update_running(c),
                (Unit::Res(u), UnitCtx::Res(c)) => u.update_running(c),
                _ => {}
            }
        }
        Ok(())
    }

    /// Trainable tensors in layer order.
    pub fn parameters(&self) -> Vec<NamedParam<'_, T>> {
        let mut out = Vec::new();
        for (name, unit) in &self.units {
            let local: Vec<(&'static str, ParamKind, &Tensor<T>)> = match unit {
                Unit::Conv(u) => u.params(),
                Unit::Res(u) => u.params(),
                Unit::Pool => Vec::new(),
                Unit::Dense { dense, .. } => vec![
                    ("weight", ParamKind::Weight, &dense.weight),
                    ("bias", ParamKind::Bias, &dense.bias),
                ],
            };
            out.extend(local.into_iter().map(|(l, kind, tensor)| NamedParam {
                name: format!("{name}.{l}"),
                kind,
                tensor,
            }));
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<NamedParamMut<'_, T>> {
        let mut out = Vec::new();
        for (name, unit) in &mut self.units {
            let local: Vec<(&'static str, ParamKind, &mut Tensor<T>)> = match unit {
                Unit::Conv(u) => u.params_mut(),
                Unit::Res(u) => u.params_mut(),
                Unit::Pool => Vec::new(),
                Unit::Dense { dense, .. } => vec![
                    ("weight", ParamKind::Weight, &mut dense.weight),
                    ("bias", ParamKind::Bias, &mut dense.bias),
                ],
            };
            out.extend(local.into_iter().map(|(l, kind, tensor)| NamedParamMut {
                name: format!("{name}.{l}"),
                kind,
                tensor,
            }));
        }
        out
    }

    /// Non-trainable state (BN running statistics).
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (name, unit) in &self.units {
            let local = match unit {
                Unit::Conv(u) => u.buffers(),
                Unit::Res(u) => u.buffers(),
                _ => Vec::new(),
            };
            out.extend(local.into_iter().map(|(l, t)| (format!("{name}.{l}"), t)));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (name, unit) in &mut self.units {
            let local = match unit {
                Unit::Conv(u) => u.buffers_mut(),
                Unit::Res(u) => u.buffers_mut(),
                _ => Vec::new(),
            };
            out.extend(local.into_iter().map(|(l, t)| (format!("{name}.{l}"), t)));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.tensor.len()).sum()
    }

    /// Parameters and buffers, cloned, keyed by name.
    pub fn state(&self) -> ParamSet<T> {
        let mut set = ParamSet::new();
        for p in self.parameters() {
            set.insert(p.name, p.tensor.clone());
        }
        for (name, t) in self.buffers() {
            set.insert(name, t.clone());
        }
        set
    }

    /// Mutable access to every named tensor, parameters first.
    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        let mut buffers: Vec<(String, &mut Tensor<T>)> = Vec::new();
        // Split borrows through the units so parameters and buffers can be
        // handed out together.
        for (name, unit) in &mut self.units {
            match unit {
                Unit::Conv(u) => {
                    let ConvUnit { conv, bn } = u;
                    out.push((format!("{name}.conv.weight"), &mut conv.weight));
                    out.push((format!("{name}.conv.bias"), &mut conv.bias));
                    push_bn(&mut out, &mut buffers, name, "bn", bn);
                }
                Unit::Res(u) => {
                    let VoxRes { bn1, conv1, bn2, conv2 } = u;
                    push_bn(&mut out, &mut buffers, name, "bn1", bn1);
                    out.push((format!("{name}.conv1.weight"), &mut conv1.weight));
                    out.push((format!("{name}.conv1.bias"), &mut conv1.bias));
                    push_bn(&mut out, &mut buffers, name, "bn2", bn2);
                    out.push((format!("{name}.conv2.weight"), &mut conv2.weight));
                    out.push((format!("{name}.conv2.bias"), &mut conv2.bias));
                }
                Unit::Pool => {}
                Unit::Dense { dense, .. } => {
                    out.push((format!("{name}.weight"), &mut dense.weight));
                    out.push((format!("{name}.bias"), &mut dense.bias));
                }
            }
        }
        out.extend(buffers);
        out
    }

    /// Same network with every tensor converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut other = Model::<U>::build_zeroed(self.config.clone()).expect("config already validated");
        let src = self.state();
        for (name, t) in other.state_mut() {
            *t = src.get(&name).expect("identical topology").cast();
        }
        other
    }
}

fn push_bn<'a, T>(
    params: &mut Vec<(String, &'a mut Tensor<T>)>,
    buffers: &mut Vec<(String, &'a mut Tensor<T>)>,
    unit: &str,
    local: &str,
    bn: &'a mut BatchNorm3d<T>,
) {
    let BatchNorm3d {
        gamma,
        beta,
        running_mean,
        running_var,
        ..
    } = bn;
    params.push((format!("{unit}.{local}.gamma"), gamma));
    params.push((format!("{unit}.{local}.beta"), beta));
    buffers.push((format!("{unit}.{local}.running_mean"), running_mean));
    buffers.push((format!("{unit}.{local}.running_var"), running_var));
}
