//! Command line and HTTP front end for `gd-core`.

pub mod commands;
pub mod server;
