//! Library surface of the pipeline CLI, so integration tests can drive the
//! same stage code the binary runs.

pub mod config;
pub mod stages;

pub use config::{Overrides, RunConfig};
pub use stages::{run_screen, Stage, StageFailure, StageStatus};
