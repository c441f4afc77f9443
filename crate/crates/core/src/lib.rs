pub mod datagen;
pub mod error;
pub mod experiment;
pub mod gradcore;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod trainer;

pub use error::{Error, Result};
