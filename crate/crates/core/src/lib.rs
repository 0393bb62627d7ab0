pub mod checkpoint;
pub mod critic;
pub mod data;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
