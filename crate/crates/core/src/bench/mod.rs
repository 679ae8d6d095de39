//! Controllers and the experiment harness: the conservative reference
//! controller, batch benchmarking with per-trip lower bounds, ablation
//! grids, and report assembly.

pub mod baseline;
pub mod report;
pub mod runner;

pub use baseline::{baseline_controller, BaselineConfig};
pub use report::{fuel_economy_mpg, BenchmarkReport, TripRow, KG_PER_GALLON};
pub use runner::{
    ablation_csv, ablation_grid, run_ablation, run_benchmark, AblationRow, AblationSpec,
    BenchConfig, RolloutOutcome,
};
