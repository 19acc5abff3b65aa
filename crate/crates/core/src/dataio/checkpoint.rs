//! CKPT: named f32 tensors plus JSON metadata.
//!
//! Layout (little-endian): magic `CKPT`, version u16, metadata length u32,
//! metadata JSON, tensor count u32, then per tensor a u16 name length, the
//! UTF-8 name, a u8 rank, `rank` u32 extents and the f32 payload. Adam
//! moments ride along as ordinary tensors under [`OPTIM_PREFIX`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::binary::{format_error, put_f32s, read_all, write_atomic, Reader};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamSet};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const CKPT_MAGIC: [u8; 4] = *b"CKPT";
pub const CKPT_VERSION: u16 = 1;
/// Reserved name prefix for optimizer tensors.
pub const OPTIM_PREFIX: &str = "__optim.";
const ADAM_M: &str = "__optim.adam.m.";
const ADAM_V: &str = "__optim.adam.v.";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamMeta {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub lr: f64,
    /// SHA-256 of the canonical training configuration.
    pub config_digest: String,
    pub task: String,
    pub model: Option<ModelConfig>,
    pub adam: Option<AdamMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// Parameters and buffers keyed by registry name.
    pub tensors: ParamSet<f32>,
    pub optimizer: Option<AdamState<f32>>,
}

/// What a non-strict load did and did not match.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// In the model but absent from the checkpoint; left as they were.
    pub missing: Vec<String>,
    /// In the checkpoint but unknown to the model; ignored.
    pub unexpected: Vec<String>,
}

impl LoadReport {
    pub fn is_exact(&self) -> bool {
        self.missing.is_empty() && self.unexpected.is_empty()
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, mut meta: CheckpointMeta, optimizer: Option<&AdamState<f32>>) -> Self {
        meta.model = Some(model.config().clone());
        meta.adam = optimizer.map(|s| AdamMeta {
            t: s.t,
            beta1: s.beta1,
            beta2: s.beta2,
            epsilon: s.epsilon,
        });
        Checkpoint {
            meta,
            tensors: model.state(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Rebuilds the model the checkpoint was taken from.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let config = self
            .meta
            .model
            .clone()
            .ok_or_else(|| Error::State("checkpoint carries no model configuration".into()))?;
        let mut model = Model::build_zeroed(config)?;
        load_into(&mut model, self, true)?;
        Ok(model)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::State(format!("checkpoint metadata: {e}")))?;
        let mut named: Vec<(String, &Tensor<f32>)> = self.tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        if let Some(opt) = &self.optimizer {
            named.extend(opt.m.iter().map(|(n, t)| (format!("{ADAM_M}{n}"), t)));
            named.extend(opt.v.iter().map(|(n, t)| (format!("{ADAM_V}{n}"), t)));
        }
        let mut out = Vec::new();
        out.extend_from_slice(&CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(meta.len()).expect("metadata under 4 GiB").to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&u32::try_from(named.len()).expect("tensor count fits").to_le_bytes());
        for (name, t) in named {
            let len =
                u16::try_from(name.len()).map_err(|_| Error::State(format!("tensor name `{name}` is too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::try_from(t.ndim()).expect("rank fits u8"));
            for &d in t.shape() {
                out.extend_from_slice(&u32::try_from(d).expect("extent fits u32").to_le_bytes());
            }
            put_f32s(&mut out, t.data());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.array::<4>("magic")? != CKPT_MAGIC {
            return Err(format_error(0, "bad magic, expected CKPT"));
        }
        let version = r.u16("version")?;
        if version != CKPT_VERSION {
            return Err(format_error(4, format!("unsupported version {version}")));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta_at = r.pos();
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| format_error(meta_at, format!("metadata JSON: {e}")))?;
        let count = r.u32("tensor count")?;
        let mut tensors = ParamSet::new();
        let (mut m, mut v) = (ParamSet::new(), ParamSet::new());
        for _ in 0..count {
            let at = r.pos();
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| format_error(at + 2, "tensor name is not UTF-8"))?
                .to_string();
            let rank_at = r.pos();
            let rank = r.u8("rank")? as usize;
            if rank == 0 {
                return Err(format_error(rank_at, format!("tensor `{name}` has rank 0")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n > 0)
                .ok_or_else(|| format_error(rank_at, format!("tensor `{name}` has bad extents {shape:?}")))?;
            let data = r.f32s(numel, "tensor payload")?;
            let t = Tensor::from_vec(&shape, data)?;
            let dup = if let Some(p) = name.strip_prefix(ADAM_M) {
                m.insert(p, t)
            } else if let Some(p) = name.strip_prefix(ADAM_V) {
                v.insert(p, t)
            } else if name.starts_with(OPTIM_PREFIX) {
                return Err(format_error(at, format!("unknown optimizer tensor `{name}`")));
            } else {
                tensors.insert(name.clone(), t)
            };
            if dup.is_some() {
                return Err(format_error(at, format!("duplicate tensor `{name}`")));
            }
        }
        if r.remaining() != 0 {
            return Err(format_error(r.pos(), format!("{} trailing byte(s)", r.remaining())));
        }
        let optimizer = match &meta.adam {
            Some(a) => Some(AdamState {
                m,
                v,
                t: a.t,
                beta1: a.beta1,
                beta2: a.beta2,
                epsilon: a.epsilon,
            }),
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(format_error(meta_at, "optimizer tensors without adam metadata")),
        };
        Ok(Checkpoint {
            meta,
            tensors,
            optimizer,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &ckpt.encode()?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::decode(&read_all(path.as_ref())?)
}

/// Copies matching tensors into `model`. Shapes are checked for every
/// matched name before anything is written, so a failed load leaves the
/// model untouched. With `strict`, any missing or unexpected name fails too.
pub fn load_into(model: &mut Model<f32>, ckpt: &Checkpoint, strict: bool) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    let mut slots = model.state_mut();
    for (name, t) in &slots {
        match ckpt.tensors.get(name) {
            Some(src) if src.shape() != t.shape() => {
                return Err(Error::Load {
                    tensor: name.clone(),
                    message: format!("checkpoint shape {:?}, model shape {:?}", src.shape(), t.shape()),
                })
            }
            Some(_) => report.loaded.push(name.clone()),
            None => report.missing.push(name.clone()),
        }
    }
    report.unexpected = ckpt
        .tensors
        .keys()
        .filter(|k| !slots.iter().any(|(n, _)| n == *k))
        .cloned()
        .collect();
    if strict && !report.is_exact() {
        let first = report
            .missing
            .first()
            .or(report.unexpected.first())
            .cloned()
            .unwrap_or_default();
        return Err(Error::Load {
            tensor: first,
            message: format!(
                "strict load: missing {:?}, unexpected {:?}",
                report.missing, report.unexpected
            ),
        });
    }
    for (name, t) in slots.iter_mut() {
        if let Some(src) = ckpt.tensors.get(name) {
            t.data_mut().copy_from_slice(src.data());
        }
    }
    Ok(report)
}
