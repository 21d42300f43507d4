//! Synthetic oriented-object scenes, the noise/blur/speckle degradation
//! pipeline, on-disk datasets and frequency diagnostics.

pub mod dataset;
mod error;
pub mod image;
pub mod noise;
pub mod rng;
pub mod scene;
pub mod spectrum;

pub use dataset::{build, Dataset, DatasetSpec, DegradedSet, Manifest, Sample};
pub use error::{DegradeError, Result};
pub use image::{read_pnm, snap, to_gray, write_pnm, PIXEL_QUANTUM};
pub use noise::{gaussian_blur, gaussian_kernel, gaussian_noise, speckle, speckle_field, DegradationSpec, NoiseUnit, PRESETS};
pub use rng::{stage_rng, Stage};
pub use scene::{class_style, synth_scene, Background, Scene, SceneSpec};
pub use spectrum::{band_report, dft2, dft_magnitude, frequency_split, BandReport};
