//! Occlusion-robust face matching.
//!
//! The pipeline: a trunk CNN maps aligned faces to top-layer convolutional
//! features and embeddings; per-facial-block mask generators are trained on
//! clean/occluded pairs with a differential siamese objective; their mean soft
//! masks are distilled into a binary feature-discarding mask dictionary; and at
//! match time the probe's composed mask multiplies BOTH probe and gallery
//! features before cosine scoring, so corrupted feature elements are excluded
//! from the comparison on both sides.

pub mod analysis;
pub mod error;
pub mod scalar;

pub mod geom;
pub mod grid;

pub mod config;
pub mod dataset;
pub mod face;

pub mod dictionary;
pub mod experiment;
pub mod io;
pub mod loss;
pub mod matcher;
pub mod nn;
pub mod occlude;
pub mod pdsn;
pub mod trunk;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};

/// Single-precision aliases for the main pipeline types. Training and
/// matching run in `f32` by default; the `f64` twins exist for numerical
/// cross-checks such as finite-difference gradient tests.
pub type TrunkNetF32 = trunk::TrunkNet<f32>;
pub type TrunkNetF64 = trunk::TrunkNet<f64>;
pub type MaskGeneratorF32 = pdsn::MaskGenerator<f32>;
pub type MaskGeneratorF64 = pdsn::MaskGenerator<f64>;
pub type MaskDictionaryF32 = dictionary::MaskDictionary<f32>;
pub type MaskDictionaryF64 = dictionary::MaskDictionary<f64>;
pub type FaceSetF32 = dataset::FaceSet<f32>;
pub type OccluderCorpusF32 = occlude::OccluderCorpus<f32>;
