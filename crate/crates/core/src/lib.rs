//! Video object segmentation with a space-time transformer.
//!
//! A two-path convolutional extractor embeds the query frame and the
//! mask-annotated reference frames, a transformer encoder relates all
//! spatio-temporal positions, a target-query decoder and attention block
//! localize the object, and a refinement head decodes a full-resolution mask.
//! Multi-object scenes run the model once per object and merge the per-object
//! probabilities by normalized odds.
//!
//! The crate also ships the surrounding tooling: synthetic video benchmark
//! generation, two-stage training, reference-set management for inference,
//! and region/boundary evaluation metrics.

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod inference;
pub mod model;
pub mod segmentation;
pub mod synth;
pub mod training;
pub mod transformer;

pub use autodiff::{ParamId, ParamStore, Tape, VarId};
pub use config::{MaskFusion, ModelConfig, ReferencePolicy, RunConfig};
pub use dataset::{Clip, Dataset};
pub use error::{Result, VosError};
pub use training::Trainer;
