//! MoTaDual at desk scale: a miniature dual encoder, text-only textual
//! inversion pretraining, multi-modal prompt tuning for zero-shot composed
//! image retrieval, a synthetic benchmark and an evaluation suite.

pub mod datagen;
pub mod encoder;
mod error;
pub mod experiment;
pub mod inversion;
pub mod numerics;
pub mod prompt_tuning;
pub mod retrieval_eval;
pub mod training;

pub use error::{Error, Result};
