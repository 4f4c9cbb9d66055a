//! Discovery and explanation of systematic precision errors in
//! semantic-segmentation predictions.
//!
//! The crate is organised as a staged batch pipeline:
//!
//! - [`patch`] turns predicted class maps into per-class patch sets.
//! - [`oracle`] is the uniform client for the foundation-model oracles
//!   (open-vocabulary detector, joint image/text embedder, captioner,
//!   sentence encoder), with HTTP, fixture and content-addressed cache
//!   backends.
//! - [`detection`] classifies patches as precision errors.
//! - [`index`] holds the exact cosine k-NN index over error embeddings.
//! - [`systematicity`] computes the linkage scores and the final decision.
//! - [`evaluation`] scores the pipeline against ground truth and human
//!   verdicts.
//! - [`pipeline`] orchestrates stages inside a run directory.

pub mod artifact;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod index;
pub mod oracle;
pub mod patch;
pub mod pipeline;
pub mod systematicity;

pub use error::{Error, Result};
