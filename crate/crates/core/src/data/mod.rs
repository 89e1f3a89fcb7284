//! Synthetic segmentation benchmark and the toy feature encoder.

mod dataset;
mod encoder;
mod rng;
mod synth;

pub use dataset::{image_file, is_held_out, label_file, sample_seed, Dataset, Sample, DATASET_HEADER};
pub use encoder::{encode, BoundEncoder, EncoderParams};
pub use rng::{mix64, SplitMix64};
pub use synth::{generate, PlacedShape, ShapeGeometry, SynthConfig, SynthSample};
