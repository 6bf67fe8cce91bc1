//! Deep variational Bayes filters with locally linear latent transitions.

pub mod autodiff;
pub mod distributions;
pub mod environments;
pub mod evaluation;
pub mod error;
pub mod model;
pub mod trainer;
mod rng;

pub use error::{Error, Result};
pub use rng::stream_rng;
