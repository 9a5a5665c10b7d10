//! File formats, ingestion, configuration and the command line for the
//! `thrnn-core` model.
//!
//! - [`ingest`]: LastFM and Reddit log adapters.
//! - [`split_file`]: the versioned line-delimited split format.
//! - [`checkpoint`]: the versioned binary checkpoint container.
//! - [`config`]: TOML run configuration with dataset profiles.
//! - [`report`]: report, training-log and plot-data formats.
//! - [`commands`]: the work behind each subcommand.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod ingest;
pub mod report;
pub mod split_file;
