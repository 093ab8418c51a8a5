//! Federated detection data: format, augmentation, sampling and synthesis.

mod augment;
mod format;
mod prompts;
mod sampling;
mod synth;
mod types;

pub use augment::{
    build_mosaic, crop_to_window, merge_instances, random_crop, sample_mosaic_grid,
    CropConstraints, MosaicConfig, MERGE_IOU,
};
pub use format::{
    decode_png_base64, encode_png_base64, DatasetFile, ImageRecord, InstanceRecord, LoadedDataset,
};
pub use prompts::{fill, PromptMode, PromptTemplates};
pub use sampling::{
    example_rng, sample_pseudo_negatives, CategoryFrequencyTable, DatasetMixer, MIN_NEGATIVES,
};
pub use synth::{caption, color_rgb, shape_mask, synth_dataset, SynthDataset, SynthSpec, SHAPES};
pub use types::{FederatedExample, Instance};
