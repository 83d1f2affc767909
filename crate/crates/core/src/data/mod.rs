//! Stereo data types, file formats, synthetic scenes and datasets.

mod dataset;
mod pfm;
mod png;
mod scene;
mod types;

pub use dataset::{
    generate_dataset, load_dataset, load_manifest, load_stereo_dir, save_dataset, DatasetManifest, StereoPair,
    StereoPairs, MANIFEST_FILE,
};
pub use pfm::{decode_pfm, encode_pfm, read_pfm, write_pfm};
pub use png::{quantize, read_mask_png, read_png, read_png_array, write_mask_png, write_png, write_png_array};
pub use scene::{
    generate_scene, random_world, Background, Footprint, Hit, Layer, SceneConfig, SceneSample, Surface, Texture, World,
};
pub use types::{DisparityField, Image, OcclusionMask};
