//! Few-shot scoring of short student answers.
//!
//! Each answer is encoded, compared with the teacher's model answer through
//! a Siamese similarity layer, and classified by its distance to per-score
//! prototypes built from a handful of labeled examples. Training adds a
//! paraphrase-consistency loss and a contrastive loss over unlabeled
//! answers.

pub mod augment;
pub mod config;
pub mod data;
pub mod diff;
pub mod embedding;
mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod training;

pub use error::{Error, Result};
