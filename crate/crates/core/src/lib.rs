//! Temporal domain adaptation for nighttime tracking.
//!
//! A temporal generator extracts per-frame features conditioned on a memory
//! of temporal contexts. A temporal-consistent discriminator judges the
//! domain of context sequences, and alternating adversarial training pulls
//! night contexts and features towards the day distribution.

pub mod autodiff;
pub mod bbox;
pub mod checkpoint;
pub mod config;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod generator;
pub mod gradcheck;
pub mod mining;
pub mod nn;
pub mod probe;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Result, TdaError};
