//! File formats, log ingestion, parallel detection and the pipeline behind
//! the `logsentinel` command line. The numerical work lives in
//! `logsentinel-core`.

pub mod config;
pub mod error;
pub mod formats;
pub mod ingest;
pub mod io;
pub mod parallel;
pub mod pipeline;
pub mod presets;

pub use error::{Error, Result};
