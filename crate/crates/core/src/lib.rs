//! Object-centric video model: unsupervised segmentation and tracking
//! with propagated and discovered object slots, a spatial Gaussian mixture
//! likelihood, evaluation metrics, and an object arrangement task.

pub mod arrangement;
pub mod assignment;
pub mod cli;
pub mod data_synth;
pub mod dataset;
pub mod error;
pub mod latents;
pub mod mask_compose;
pub mod metrics;
pub mod net;
pub mod render;
pub mod trainer;

pub use error::{Error, Result};
