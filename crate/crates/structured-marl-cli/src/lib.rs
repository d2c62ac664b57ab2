//! Seed sweeps, result bundles and file emission behind the command-line runner.

pub mod bundle;
pub mod sweep;

pub use bundle::{ResultBundle, Stat};
pub use sweep::{parse_seeds, run_seeds, thread_count, ExperimentSpec, SeedRun};
