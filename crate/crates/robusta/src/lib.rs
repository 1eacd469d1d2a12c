//! Std companion to `robusta-core`: dataset loaders, model files, run
//! configuration, CSV reports and the command-line front end.

pub mod datasets;
pub mod error;
pub mod commands;
pub mod config;
pub mod modelfile;
pub mod report;

pub use error::{Error, Result};
pub use robusta_core as core;
