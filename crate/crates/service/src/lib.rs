//! Network and command-line front end for the bimtwin engine.

pub mod cli;
pub mod server;
pub mod wire;
