//! Library side of the `expalign` binary: configuration, scene files,
//! property suites, subcommands and report rendering.

pub mod commands;
pub mod config;
pub mod heatmap;
pub mod render;
pub mod scene;
pub mod suites;

/// Version stamped on every JSON report and heatmap sidecar.
pub const SCHEMA_VERSION: u32 = 1;
