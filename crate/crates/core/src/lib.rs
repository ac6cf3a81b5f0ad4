//! Noise-contrastive test-time training on a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod nce;
pub mod numeric;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
