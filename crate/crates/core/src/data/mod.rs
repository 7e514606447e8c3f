//! Synthetic multi-task data, augmentation and on-disk formats.

mod dataset;
mod synth;
pub mod tnsr;

pub use dataset::{
    gen_synthetic, gen_synthetic_dir, load_dataset, read_manifest, write_dataset, Dataset, Manifest, SampleFiles,
    Splits,
};
pub use synth::{
    augment, box_smooth, crop, derive_normals, generate_sample, hflip, rescale, scene_rng, AugmentConfig, Sample,
    SceneConfig, IGNORE,
};
pub use tnsr::{read_tensor_file, write_tensor_file, StoredTensor};

#[cfg(test)]
mod tests;
