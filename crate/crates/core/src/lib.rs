pub mod audio;
pub mod datasim;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
