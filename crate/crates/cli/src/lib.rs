//! Command-line front end and HTTP service.

pub mod cli;
pub mod server;
