//! Few-shot segmentation on synthetic shapes.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dense_comparison;
pub mod episodes;
pub mod error;
pub mod evaluation;
pub mod files;
pub mod fusion;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod pnm;
pub mod refinement;
pub mod shapes;
pub mod state;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
