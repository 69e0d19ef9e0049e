//! Replay-free class-incremental semantic segmentation.

pub mod arcl;
pub mod checkpoint;
pub mod config;
pub mod dada;
pub mod dataset;
pub mod dcpl;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod plot;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
