//! Reproduction suites driven by the command line.

pub mod ablate;
pub mod fig1;
pub mod grids;
pub mod run;

pub use ablate::{
    aggregate, read_csv, run_grid, write_csv, AblationGrid, AblationResult, AblationRow, GridPoint, CSV_HEADER,
};
pub use fig1::{run_fig1, strictly_ordered, write_fig1, Fig1Config, Fig1Result, Fig1Row, FIG1_DIMS, FIG1_SIGMA};
pub use grids::{base_lines, builtin_grid, GRID_NAMES};
pub use run::{
    eval_checkpoint, inspect_checkpoint, logits, model_from_checkpoint, train_experiment, EvalReport, GroupCounts,
    InspectReport, RunSummary, BEST_CKPT, CONFIG_ECHO, FINAL_CKPT, MODEL_CKPT, RUN_LOG, SUMMARY,
};
