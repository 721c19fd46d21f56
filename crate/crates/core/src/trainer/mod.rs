//! Optimization loop, evaluation of the three behavioral signals, and sweeps.

mod experiment;
mod history;
mod optim;
mod run;

pub use experiment::{
    plan_sweep, run_experiment, run_sweep, summary_row, RunConfig, RunOutput, SweepAxis, SweepRun,
    SUMMARY_HEADER,
};
pub use history::{EvalRecord, Signal, TrainHistory, HISTORY_HEADER};
pub use optim::{adamw_step, OptimizerState, TrainConfig};
pub use run::{
    evaluate, resolve_model_config, train, MetricObserver, Observer, Snapshot, StopWhenReached,
    TrainOutcome, Trainer,
};
