//! Patch-token transformer for imputing incomplete time series.

pub mod adaptation;
pub mod backbone;
pub mod bench;
pub mod data;
pub mod embedding;
pub mod error;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod training;

pub use error::{Error, Result};
