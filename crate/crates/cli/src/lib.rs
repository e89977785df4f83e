//! Scenario loading, run commands, campaigns and artifact emission for the
//! sponsored-market engine.

pub mod campaign;
pub mod commands;
pub mod emit;
pub mod scenario;
