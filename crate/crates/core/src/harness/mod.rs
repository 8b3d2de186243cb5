//! Synthetic tasks, run configuration, persistence, and the command
//! implementations behind the `tlora` binary.

pub mod commands;
pub mod config;
pub mod io;
pub mod pipeline;
pub mod task;

pub use commands::Run;
pub use config::{AdapterConfig, AdapterMode, RunConfig, Variant};
pub use io::{Checkpoint, CompareRow};
pub use task::{gen_task, GeneratedTask, TaskSpec};
