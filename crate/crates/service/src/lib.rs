//! Service layer: configuration, the `iotsh` command line and the HTTP API.

pub mod alerts;
pub mod app;
pub mod cli;
pub mod config;
pub mod reports;
pub mod server;
