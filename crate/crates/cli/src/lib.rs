//! Command-line front end of the simulator: presets, configuration files and
//! output formats.

pub mod artifacts;
pub mod commands;
pub mod presets;
