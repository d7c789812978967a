//! Experiment orchestration from the command line, plus an HTTP front for
//! the marketplace services and a client that drives it.

pub mod client;
pub mod commands;
pub mod server;
