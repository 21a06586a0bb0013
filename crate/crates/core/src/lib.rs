//! Simulation core for sibling cache peering between tenants of a shared
//! micro data center.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the command
//! line and anything touching the OS live in the `cachepeer` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod cache;
pub mod config;
pub mod ids;
pub mod interception;
pub mod peering;
pub mod report;
pub mod sim;
pub mod time;
pub mod topology;
pub mod workload;
