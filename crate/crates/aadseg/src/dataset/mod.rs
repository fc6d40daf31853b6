//! Synthetic environment-robust dataset: generation, on-disk format,
//! loading, and episodic sampling.
//!
//! The defining asymmetry: support samples are clean renders, query samples
//! always carry at least one hardness tag (camouflage, small, elongated,
//! missing, blur) and a distractor shape from another family. The manifest
//! format also loads externally converted data, subject to the same
//! contracts.

mod episode;
mod generate;
mod index;
mod pnm;
mod raster;
mod shapes;
mod transforms;

pub use episode::{sample_episode, Episode};
pub use generate::{generate_dataset, GenConfig};
pub use index::{
    load_manifest, ClassEntry, DatasetIndex, ManifestRecord, SampleRef, Split, MIN_TEST_QUERIES,
    MIN_TEST_SUPPORTS,
};
pub use pnm::{read_image_pgm, read_mask_pgm, write_image_pgm, write_mask_pgm};
pub use raster::{background_mean, box_blur, masked_mean, ring_mean, value_noise, Mask, Raster};
pub use shapes::{render_mask, ShapeFamily, ShapeJitter, ALL_FAMILIES};
pub use transforms::{apply_hard_transform, HardTag, ALL_TAGS, CAMOUFLAGE_GAP, OCCLUDER_VALUE};
