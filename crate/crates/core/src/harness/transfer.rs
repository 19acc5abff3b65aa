use serde::{Deserialize, Serialize};

use crate::dataio::Checkpoint;
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TransferReport {
    /// Copied from the checkpoint, bit for bit.
    pub copied: Vec<String>,
    /// Head tensors given fresh values from the model's seed.
    pub reinitialized: Vec<String>,
    /// Checkpoint tensors that were not used.
    pub skipped: Vec<String>,
}

fn in_units(name: &str, units: &[String]) -> bool {
    units
        .iter()
        .any(|u| name.strip_prefix(u.as_str()).is_some_and(|rest| rest.starts_with('.')))
}

/// Initializes `model` from a checkpoint of a related task.
///
/// Every tensor outside `head_units` is the body: model and checkpoint
/// must hold the same body names with the same shapes, otherwise a load
/// error names the first offender and `model` is left untouched. With
/// `reinit_head` the head is drawn afresh from the model's own seed;
/// without it the head is copied too.
pub fn transfer_init(
    model: &mut Model<f32>,
    source: &Checkpoint,
    head_units: &[String],
    reinit_head: bool,
) -> Result<TransferReport> {
    let fresh = if reinit_head {
        Some(Model::<f32>::build(model.config().clone())?.state())
    } else {
        None
    };
    let mut report = TransferReport::default();
    let mut slots = model.state_mut();
    for (name, t) in &slots {
        if reinit_head && in_units(name, head_units) {
            report.reinitialized.push(name.clone());
            continue;
        }
        match source.tensors.get(name) {
            None => {
                return Err(Error::Load {
                    tensor: name.clone(),
                    message: "missing from the source checkpoint".into(),
                })
            }
            Some(src) if src.shape() != t.shape() => {
                return Err(Error::Load {
                    tensor: name.clone(),
                    message: format!("source shape {:?}, model shape {:?}", src.shape(), t.shape()),
                })
            }
            Some(_) => report.copied.push(name.clone()),
        }
    }
    for name in source.tensors.keys() {
        if slots.iter().any(|(n, _)| n == name) {
            if reinit_head && in_units(name, head_units) {
                report.skipped.push(name.clone());
            }
            continue;
        }
        if !in_units(name, head_units) {
            return Err(Error::Load {
                tensor: name.clone(),
                message: "source body tensor has no counterpart in the model".into(),
            });
        }
        report.skipped.push(name.clone());
    }

    for (name, t) in slots.iter_mut() {
        let src = match &fresh {
            Some(f) if in_units(name, head_units) => f.get(name),
            _ => source.tensors.get(name),
        };
        t.data_mut().copy_from_slice(src.expect("validated above").data());
    }
    Ok(report)
}
