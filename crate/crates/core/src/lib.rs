pub mod autodiff;
pub mod cli;
pub mod data;
pub mod estimators;
pub mod evaluation;
pub mod error;
pub mod model;
pub mod regularizer;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
