//! Datasets, file formats and the synthetic multimodal benchmark.

mod idx;
mod image_set;
mod mgt;
mod png_export;
mod synth;

pub use idx::{load_idx, parse_idx_images, parse_idx_labels};
pub use image_set::{
    assign_splits, split_of, LabelMap, LabeledImageSet, Origin, Sample, Split, Templates,
};
pub use mgt::{load_mgt, save_mgt, DType, Tensor, TensorData, MAGIC, MAX_RANK};
pub use png_export::{export_detjac_png, export_png, encode_png_gray};
pub use synth::{generate_synthetic, velocity_basis, ModeParams, Shape, SyntheticData, SyntheticSpec};
