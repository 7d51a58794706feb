pub mod encoders;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod mog;
pub mod objectives;
pub mod prompts;
pub mod report;
pub mod rng;
pub mod scenario;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub(crate) mod binio;
#[cfg(test)]
pub(crate) mod test_oracle;

pub use error::{Error, Result};

/// Identifier of a class across the whole task stream.
pub type ClassId = usize;
