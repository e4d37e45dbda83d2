//! File formats, configuration, the training loop and timed batch decoding
//! around `stnat-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fmat;
pub mod manifest;
pub mod run;

pub use error::{Error, Result};
