//! Library side of the `duda` command: config handling, the commands
//! themselves and plot emission.

pub mod commands;
pub mod config;
pub mod plot;
pub mod staging;
