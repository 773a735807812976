//! File formats and persistence for `sact-core`.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod sft;

pub use error::{IoError, Result};
