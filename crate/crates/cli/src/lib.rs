//! Experiment runner: configuration, checkpoints and subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod manifest;
