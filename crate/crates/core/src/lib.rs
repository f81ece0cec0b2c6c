pub mod autograd;
pub mod backbone;
pub mod cdn;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod losses;
pub mod mgr;
pub mod model;
pub mod psa;
pub mod trainer;

pub use error::{Error, Result};
