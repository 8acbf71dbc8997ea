//! Multi-stage goal-driven pedestrian trajectory prediction.
//!
//! A conditional variational autoencoder with an optional temporal
//! self-attention encoder produces a latent trajectory code. A two-layer
//! reverse recurrence turns it into coarse and then fine stage-goal features,
//! which guide a forward recursive decoder over bounding boxes.

pub mod checkpoint;
pub mod cli;
pub mod cvae;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod goals;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plot;
pub mod training;

pub use error::{Error, Result};
