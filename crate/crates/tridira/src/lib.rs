//! File formats, experiment orchestration and the command line for
//! [`tridira_core`].
//!
//! * [`tdrf`]: binary feature files.
//! * [`manifest`]: dataset manifests.
//! * [`checkpoint`]: training checkpoints.
//! * [`archive`]: exported representations.
//! * [`report`]: loss traces, metric reports and numeric grids.
//! * [`experiment`]: configuration files, fingerprints and dataset loading.
//! * [`cli`]: the `tridira` command.

pub mod archive;
mod bin_io;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod manifest;
pub mod report;
pub mod tdrf;

pub use error::{Error, Result};
pub use tridira_core;
