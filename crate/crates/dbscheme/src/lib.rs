//! File formats, fixtures, run artifacts and experiment driver around
//! `dbscheme-core`.

pub mod artifacts;
pub mod error;
pub mod fixtures;
pub mod ingest;
pub mod manifest;
pub mod pipeline;
pub mod sqlite;

pub use error::{Error, Result};
