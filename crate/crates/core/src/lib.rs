//! Region-level vision-language pretraining at desk scale.
//!
//! The crate covers corpus curation with region QA templating, box and text
//! metrics, a miniature encoder/projector/decoder model built on
//! [`finegrain_autodiff`], a two-stage trainer with an EMA teacher, a
//! synthetic shape-world corpus, and the evaluation harness.

pub mod bbox;
pub mod curation;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod imageio;
pub mod rouge;
pub mod synth;
pub mod trainer;
pub mod vlm;

pub use error::{Error, Result};
