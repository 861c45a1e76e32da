//! File formats, experiment runner and report rendering on top of `dpt-core`.

pub use dpt_core as core;

pub mod archive;
pub mod checkpoint;
pub mod commands;
pub mod error;
pub mod io;
pub mod report;
pub mod runner;

pub use error::{Error, IoError, Result};
