//! Conditional masked language models (CMLMs) with mask-predict decoding and
//! semi-autoregressive (SMART) training, sized to run on a laptop core.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod examplegen;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
