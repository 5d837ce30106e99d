//! Command-line front end of the simulator: configuration parsing and the
//! experiment drivers behind the `kvsim` binary.

pub mod config;
pub mod drivers;
