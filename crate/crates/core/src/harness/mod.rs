//! Training, evaluation over perturbation grids, sensitivity sweeps and reports.

mod checkpoint;
mod config;
mod eval;
pub mod report;
mod sweep;
mod train;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{DatasetConfig, TrainConfig};
pub use eval::{evaluate, evaluate_checkpoint, format_grid, parse_grid, EvalCell, EvalReport, EVAL_BATCH};
pub use report::{csv_string, parse_csv, read_csv, records, report_csv, CsvRecord};
pub use sweep::{sensitivity_sweep, sweep_pairs, SweepRow, SweepTable};
pub use train::{train, train_on, EpochStats, TrainOutcome};
