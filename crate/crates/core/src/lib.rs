pub(crate) mod binio;
pub mod capsule;
pub mod checks;
pub mod cli;
pub mod degrade;
pub mod error;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
