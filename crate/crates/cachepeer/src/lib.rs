//! File formats and command implementations for the `cachepeer` binary.
//!
//! Scenarios and reports are JSON; traces, access logs and rule tables are
//! CSV. Every writer here has a matching reader.

pub mod commands;
pub mod error;
pub mod scenario;
pub mod traces;

pub use error::CliError;
