//! Experiment orchestration: configuration sweeps, initialization stability,
//! fixed against learned offsets, and per-layer offset reports.

mod beta;
mod config;
mod experiments;
mod records;

pub use beta::{run_beta_report, BetaReport, BetaRow};
pub use config::{ExperimentConfig, ExperimentKind, Sweep};
pub use experiments::{
    experiment_dir, float_spec, pretrain_float, render_summary, run_beta_experiment, run_cell, run_cells, run_config_sweep,
    run_fixed_offset, run_init_stability, setting, shared_float, sweep_cells, write_experiment, Cell,
    ExperimentResult, RunOutput,
};
pub use records::{
    format_quantizers, load_records, parse_quantizers, read_records, save_records, summarize, write_records,
    write_trace, RunKey, RunRecord, Summary,
};
