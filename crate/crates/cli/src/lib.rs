//! IO, configuration, and the experiment harness around the core library:
//! dataset files, model checkpoints, run configuration, experiment runners,
//! and report emission.

pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod experiments;
pub mod pool;
pub mod report;
