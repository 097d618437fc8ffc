//! Few-shot continual relation extraction with a mutual-information
//! objective between the classifier branch and the language-model head.

pub mod cli;
pub mod continual;
pub mod data;
pub mod error;
pub mod losses;
pub mod memory;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
