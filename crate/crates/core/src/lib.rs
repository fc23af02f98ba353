//! Desk-scale face recognition laboratory.
//!
//! Everything runs on an in-house autodiff tensor engine over procedurally
//! generated identities: small convolutional feature extractors, an
//! enrollment/authentication pipeline with a persisted feature database,
//! gradient-forged trigger patches with physical-transform robustness, an
//! adversarial fine-tuning defense, and an evaluation harness that turns all
//! of it into serialized reports.

pub mod defense;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod forge;
pub mod frs;
pub mod synth;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
