pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod dsp;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod metadata;
pub mod model;
pub mod pipeline;
pub mod scoring;

pub use error::{HmicError, Result};
