//! Command-line orchestration for the u4d pipeline: configuration, the
//! synth → train → sample → eval commands, reports and renders.

pub mod commands;
pub mod config;
pub mod eval;
pub mod pipeline;
pub mod render;

pub use commands::run_command;
