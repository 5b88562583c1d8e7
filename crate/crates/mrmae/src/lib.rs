//! File formats, synthetic data and the command-line front end of the
//! masked-autoencoder toolkit.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod synth;

pub use error::{IoError, Result};
pub use mrmae_core as core;
