//! Experiment commands, run configuration and reports.

mod commands;
mod config;
pub mod eval;
mod output;
pub mod trace;

pub use commands::{
    cmd_eval_gaussian, cmd_eval_mask, cmd_gen_data, cmd_sample, cmd_schedule_trace, cmd_train, net_config,
    run, Command, Outcome,
};
pub use config::{
    parse_overrides, DenoiserSource, FixedMaskSource, GaussianKind, ImageFormat, MaskPolicyName, RunConfig,
};
pub use output::{
    mask_image, write_image, write_png, write_pnm, write_run_manifest, write_trace_csv, EvalReport,
    MetricResult,
};
