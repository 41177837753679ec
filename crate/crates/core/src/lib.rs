//! Hierarchy-aware multi-label classification for long-tailed label
//! distributions.

pub mod cli;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod eval;
pub mod hierarchy;
pub mod losses;
pub mod model;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
