//! Library half of the `citrus` experiment harness.
//!
//! The binary is a thin wrapper: argument parsing and exit-code mapping live
//! in `main.rs`, everything observable lives here so the test suites can
//! drive commands in-process. Every command is a pure function of its
//! resolved configuration; outputs are written atomically and are
//! byte-identical across reruns, with the single documented exception of
//! wall-clock measurements, which are quarantined in `timing.csv`.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod report;
