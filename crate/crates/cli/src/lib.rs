//! Experiment runner for the `moepipe` scheduling library.

pub mod artifacts;
pub mod config;
pub mod runner;
