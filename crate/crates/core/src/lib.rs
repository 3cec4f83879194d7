//! Multiscale RGB-D salient object detection with saliency-enhanced feature
//! fusion, its loss, metrics, data pipeline and training loop.

pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod msnet;
pub mod nn;
pub mod seff;
pub mod trainer;

pub use error::{Error, Result};
pub use seffsal_autograd as autograd;
