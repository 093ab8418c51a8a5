//! Command-line interface and HTTP service over `ovd-core`.

pub mod commands;
pub mod server;

pub use commands::{run, Cli};
