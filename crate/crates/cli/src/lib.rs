//! The `npuppet` command line and HTTP service.
//!
//! Every command exits with 0 on success, 2 when its input is invalid and 3
//! when the computation fails numerically.

pub mod commands;
pub mod files;
pub mod service;

pub use commands::{run, Cli};
pub use files::Failure;
