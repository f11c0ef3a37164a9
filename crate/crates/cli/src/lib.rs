//! Configuration-driven experiment runner built on `sgdlab`.
//!
//! A config file describes one experiment. [`commands`] executes it over
//! all seeds, writes CSV tables, a metadata document and an SVG plot, and
//! maps the verdict to a process exit code.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod output;
pub mod plot;
pub mod sweep;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] sgdlab::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Every error is a usage or configuration failure from the caller's
    /// point of view.
    pub fn exit_code(&self) -> i32 {
        1
    }
}
