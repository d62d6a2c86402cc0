//! Std companion to `dsdf-core`: image files, checkpoints, JSON config,
//! corpus handling, the training loop and reports behind the `dsdf` CLI.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod infer;
pub mod io;
pub mod synth;
pub mod train;

pub use dsdf_core as core;
pub use error::{Error, Result};
