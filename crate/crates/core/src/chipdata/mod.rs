//! Chip, label and manifest data model, the AECHIP1 container, spatially
//! blocked splitting and batch padding.

mod batch;
mod chip;
pub mod format;
mod manifest;
mod split;

pub use batch::{assemble_batch, chip_tensor, crop_map, padded_dims, Batch};
pub use chip::{ClassLabel, EmbeddingChip, LabelMask, Sample, BANDS, MIN_SIDE};
pub use format::{decode_chip, encode_chip, read_chip, write_chip};
pub use manifest::{load_samples, DatasetManifest, ManifestEntry, Split, MANIFEST_VERSION};
pub use split::{block_index, spatial_split, SplitRatios};
