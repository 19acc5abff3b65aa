//! JSON-lines dataset manifests.
//!
//! ```text
//! {"path": "vols/0001.vol3", "label": 1, "split": "train", "tags": ["site-a"]}
//! {"path": "vols/0001.vol3", "label": 1, "split": "train", "augment": {"kind": "flip"}}
//! ```

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::augment::Augment;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
    /// Applied when the volume is loaded; set on oversampled copies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<Augment>,
}

impl ManifestRecord {
    pub fn new(path: impl Into<String>, label: u8) -> Self {
        ManifestRecord {
            path: path.into(),
            label,
            split: None,
            tags: Vec::new(),
            augment: None,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = Some(split);
        self
    }

    /// Train split, or not yet assigned to any split.
    pub fn is_trainable(&self) -> bool {
        matches!(self.split, None | Some(Split::Train))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Records whose path already appeared on an earlier line.
    pub duplicate_paths: usize,
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut duplicate_paths = 0;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.path.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty path".into(),
            });
        }
        if rec.label > 1 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("label must be 0 or 1, got {}", rec.label),
            });
        }
        if !seen.insert(rec.path.clone()) {
            duplicate_paths += 1;
        }
        records.push(rec);
    }
    Ok(Manifest {
        records,
        duplicate_paths,
    })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn format_manifest(records: &[ManifestRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_manifest(records: &[ManifestRecord], path: impl AsRef<Path>) -> Result<()> {
    super::binary::write_atomic(path.as_ref(), format_manifest(records).as_bytes())
}
