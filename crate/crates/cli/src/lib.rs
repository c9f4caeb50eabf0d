//! Standard-library companion to `dfsq-core`: configuration files, the
//! binary checkpoint format, CSV logs, dataset files, and the CLI command
//! implementations. The `dfsq` binary is a thin wrapper over
//! [`commands`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csvlog;
pub mod dataio;
