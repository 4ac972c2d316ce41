pub mod autodiff;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod latent;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
