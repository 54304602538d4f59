//! On-disk formats: PPM images, the dataset directory layout, and binary
//! model checkpoints.

mod checkpoint;
mod dataset;
mod ppm;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dataset::{
    apply_mask, load_dataset, write_illuminants_csv, write_labels_csv, write_manifest, write_masks_csv, Dataset,
    DatasetManifest, IlluminantMode, LabeledImage, Split, MANIFEST_VERSION,
};
pub use ppm::{decode_ppm, encode_ppm, read_image, write_image};

pub use crate::colorops::MaskRect;
