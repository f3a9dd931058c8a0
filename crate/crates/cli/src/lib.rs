//! Command implementations behind the `stworld` binary, and the steering
//! session server.

pub mod commands;
pub mod config;
pub mod serve;
