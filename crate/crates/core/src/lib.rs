//! Multi-pretext masked convolutional autoencoder for multi-modal
//! geospatial rasters, with a synthetic data generator and a downstream
//! evaluation harness.

pub mod error;
pub mod cli;
pub mod eval;
pub mod losses;
pub mod masking;
pub mod model;
pub mod nn;
pub mod pretrain;
pub mod schema;
pub mod synthgen;

pub use error::{Error, Result};
