pub mod codec;
pub mod config;
pub mod datagen;
pub mod error;
pub mod image;
pub mod metrics;
pub mod persist;
pub mod pipeline;
pub mod sampler;
pub mod tokenizer;
pub mod transformer;

pub use error::{Error, Result};
