//! Cycle-level simulator of a virtualized NoC-based reconfigurable system.

pub mod config;
pub mod engine;
pub mod harness;
pub mod manager;
pub mod model;
pub mod ni;
pub mod pe;
pub mod router;
pub mod stats;
pub mod trace;
pub mod workload;
