//! File formats, sequence IO and command-line runs on top of `depthvo-core`.

pub mod cli;
pub mod dataio;
mod error;

pub use error::{Error, Result};
