//! Command-line frontend and HTTP service.

pub mod catalog;
pub mod commands;
pub mod config;
pub mod server;
