//! Service layer: configuration, episode registry, HTTP API, and CLI.

pub mod api;
pub mod cli;
pub mod config;
pub mod store;
