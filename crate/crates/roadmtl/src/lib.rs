//! Road-area segmentation with an auxiliary steering task: multi-scale
//! multi-task model, adversarial domain adaptation, and the training /
//! evaluation machinery around them.

pub mod adversarial;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
