//! Scenario simulation, filtering runs and the verification suite behind
//! the `pgfl` binary.

pub mod config;
pub mod run;
pub mod simulate;
pub mod verify;
