//! File formats, configuration and pipeline driver around `measx-core`.
//!
//! * [`tsv`]: corpus directories (annotation TSV plus per-document text files).
//! * [`memb`]: precomputed per-token vectors.
//! * [`checkpoint`]: stage parameters and their JSON sidecars.
//! * [`config`]: TOML configuration with presets and environment overrides.
//! * [`pipeline`]: training, prediction, threshold tuning and scoring over files.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod memb;
pub mod pipeline;
pub mod tsv;

pub use error::{Error, Result};
