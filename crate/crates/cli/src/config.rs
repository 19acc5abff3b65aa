//! Flat run configuration: every setting has a dotted key such as
//! `train.lr` or `model.input_shape.d`, and the on-disk form is a single
//! JSON object of those keys.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use voxres::dataio::{AugmentRanges, PhantomConfig, SplitScheme};
use voxres::harness::TrainConfig;
use voxres::preprocess::PreprocessConfig;
use voxres::ModelConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Balance {
    /// Undersampling for `train`, oversampling for `finetune`.
    #[default]
    Auto,
    None,
    Undersample,
    Oversample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceConfig {
    pub strategy: Balance,
    pub augment: AugmentRanges,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig {
            strategy: Balance::Auto,
            augment: AugmentRanges::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    #[default]
    Fractions,
    Counts,
}

/// Used only for manifests whose records carry no split yet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub mode: SplitMode,
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            mode: SplitMode::Fractions,
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitConfig {
    pub fn scheme(&self) -> Result<SplitScheme, CliError> {
        Ok(match self.mode {
            SplitMode::Fractions => SplitScheme::Fractions {
                train: self.train,
                val: self.val,
                test: self.test,
            },
            SplitMode::Counts => {
                let count = |x: f64, key: &str| {
                    if x >= 0.0 && x.fract() == 0.0 {
                        Ok(x as usize)
                    } else {
                        Err(CliError::Usage(format!(
                            "split.{key} must be a whole number in counts mode"
                        )))
                    }
                };
                SplitScheme::Counts {
                    train: count(self.train, "train")?,
                    val: count(self.val, "val")?,
                    test: count(self.test, "test")?,
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub phantom: PhantomConfig,
    pub preprocess: PreprocessConfig,
    pub split: SplitConfig,
    pub balance: BalanceConfig,
}

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(&key, child, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), v.clone());
            } else {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("flattened keys never nest under a leaf");
            }
        }
    }
    Value::Object(root)
}

impl RunConfig {
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten_into("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self, CliError> {
        serde_json::from_value(unflatten(flat)).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
    }

    /// Starts from `base`, applies the file's keys and then each `key=value`
    /// override. Values parse as JSON, falling back to a plain string.
    pub fn resolve(base: RunConfig, file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut flat = base.to_flat();
        let mut set = |key: &str, v: Value, origin: &str| {
            if !flat.contains_key(key) {
                return Err(CliError::Usage(format!("unknown configuration key `{key}` ({origin})")));
            }
            flat.insert(key.to_string(), v);
            Ok(())
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let obj: Map<String, Value> = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {} is not a flat JSON object: {e}", path.display())))?;
            for (k, v) in obj {
                set(&k, v, "config file")?;
            }
        }
        for o in overrides {
            let (k, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{o}` is not key=value")))?;
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set(k.trim(), v, "--set")?;
        }
        Self::from_flat(&flat)
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(&self.to_flat()).expect("config serializes");
        std::fs::write(path, text + "\n").map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }
}
