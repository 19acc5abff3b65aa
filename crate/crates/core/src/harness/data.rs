use std::path::{Path, PathBuf};

use crate::dataio::{augment, read_volume, ManifestRecord, Phantom, Split};
use crate::error::{Error, Result};
use crate::preprocess::Volume;
use crate::tensor::Tensor;

/// Labelled volumes addressed by index.
pub trait Dataset: Sync {
    fn len(&self) -> usize;
    fn label(&self, index: usize) -> u8;
    fn volume(&self, index: usize) -> Result<Volume>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn labels(&self) -> Vec<u8> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct InMemoryDataset {
    items: Vec<(Volume, u8)>,
}

impl InMemoryDataset {
    pub fn new(items: Vec<(Volume, u8)>) -> Result<Self> {
        if items.iter().any(|(_, l)| *l > 1) {
            return Err(Error::Validation("labels must be 0 or 1".into()));
        }
        Ok(InMemoryDataset { items })
    }

    pub fn from_phantoms(phantoms: impl IntoIterator<Item = Phantom>) -> Self {
        InMemoryDataset {
            items: phantoms.into_iter().map(|p| (p.volume, p.label)).collect(),
        }
    }

    /// Items at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        InMemoryDataset {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
        }
    }
}

impl Dataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn label(&self, index: usize) -> u8 {
        self.items[index].1
    }

    fn volume(&self, index: usize) -> Result<Volume> {
        Ok(self.items[index].0.clone())
    }
}

/// Manifest records read from disk on demand, with any augmentation
/// directive applied at load time.
#[derive(Debug, Clone)]
pub struct ManifestDataset {
    root: PathBuf,
    records: Vec<ManifestRecord>,
}

impl ManifestDataset {
    /// Relative record paths resolve against `root`.
    pub fn new(root: impl AsRef<Path>, records: Vec<ManifestRecord>) -> Self {
        ManifestDataset {
            root: root.as_ref().to_path_buf(),
            records,
        }
    }

    pub fn split(root: impl AsRef<Path>, records: &[ManifestRecord], split: Split) -> Self {
        Self::new(
            root,
            records.iter().filter(|r| r.split == Some(split)).cloned().collect(),
        )
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }
}

impl Dataset for ManifestDataset {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn label(&self, index: usize) -> u8 {
        self.records[index].label
    }

    fn volume(&self, index: usize) -> Result<Volume> {
        let r = &self.records[index];
        let v = read_volume(self.root.join(&r.path))?;
        match &r.augment {
            Some(a) => augment(&v, a),
            None => Ok(v),
        }
    }
}

/// Stacks the volumes at `indices` into `[B, 1, z, y, x]` plus labels.
pub fn assemble_batch(data: &dyn Dataset, indices: &[usize]) -> Result<(Tensor, Vec<f32>)> {
    let mut dims = None;
    let mut buf = Vec::new();
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let v = data.volume(i)?;
        match dims {
            None => dims = Some(v.dims()),
            Some(d) if d != v.dims() => {
                return Err(Error::shape(format!(
                    "batch mixes volume extents {d:?} and {:?}",
                    v.dims()
                )))
            }
            _ => {}
        }
        buf.extend_from_slice(v.data());
        labels.push(f32::from(data.label(i)));
    }
    let [d, h, w] = dims.ok_or_else(|| Error::config("empty batch"))?;
    Ok((Tensor::from_vec(&[indices.len(), 1, d, h, w], buf)?, labels))
}
