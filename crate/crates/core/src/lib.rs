pub mod baselines;
pub mod dataset;
pub mod error;
pub mod evalx;
pub mod ks;
pub mod operator;
pub mod refiner;
pub mod scalar;
pub mod spectral;
pub mod train;

pub use error::{Error, FormatError, Result};
