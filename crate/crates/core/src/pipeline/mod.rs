//! Training, generation, sweeps and reporting.

mod config;
pub mod demo;
mod model;
mod report;
mod sweep;

pub use config::{PrivacySettings, RunConfig};
pub use model::{generate, seeds, train_model, BUDGET_TOLERANCE};
pub use sweep::{
    evaluate_files, load_inputs, plan_cells, run_cell, run_experiment, run_experiment_on, Cell, SweepSummary, CELLS_DIR,
    CHECKPOINT_DIR, REPORT_CSV, REPORT_JSON, SYNTHETIC_CSV,
};
pub use report::{write_aggregate, write_report, Aggregate, GridKey, ReportFiles, Stat, METRICS};
