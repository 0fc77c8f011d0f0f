//! Radar echo synthesis, sequence features, token-weighted transformer
//! fine-tuning and false-alarm-rate controlled detection.

pub mod data;
pub mod features;
pub mod models;
pub mod pipeline;
pub mod training;
pub mod detect;
pub mod error;

pub use error::{Error, Result};
