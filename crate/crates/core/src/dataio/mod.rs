//! File formats, manifests, class balancing, augmentation and synthetic
//! phantoms.

mod augment;
mod balance;
pub(crate) mod binary;
mod checkpoint;
mod manifest;
mod phantom;
mod volume_io;

pub use augment::{augment, Augment, AugmentRanges};
pub use balance::{oversample_with_augmentation, split_dataset, undersample_majority, SplitScheme};
pub use checkpoint::{
    load_checkpoint, load_into, save_checkpoint, AdamMeta, Checkpoint, CheckpointMeta, LoadReport, CKPT_MAGIC,
    CKPT_VERSION, OPTIM_PREFIX,
};
pub use manifest::{format_manifest, load_manifest, parse_manifest, write_manifest, Manifest, ManifestRecord, Split};
pub use phantom::{generate_phantom, generate_phantoms, sphere_voxel_count, Phantom, PhantomConfig, Task};
pub use volume_io::{
    decode_volume, encode_volume, read_volume, write_volume, VOL3_HEADER_LEN, VOL3_MAGIC, VOL3_VERSION,
};
