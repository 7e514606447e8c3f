//! Losses, optimization, the training-strategy matrix, metrics and
//! gradient instrumentation.

mod losses;
mod metrics;
mod objective;
mod optim;
mod probe;
mod run;
mod strategy;

pub use losses::{loss_depth, loss_normal, loss_segmentation};
pub use metrics::{
    argmax_classes, confusion, metric_mean_angle, metric_miou, metric_pixel_acc, metric_rel, metric_rms, Metrics,
};
pub use objective::{build_modules, joint_objective, kendall_path, task_loss, Batch, DsHeads, Objective, TrainModules, DS_SCALE};
pub use optim::{poly_lr, Adam, Sgd};
pub use probe::{GradProbe, DEFAULT_PROBE_LAYERS};
pub use run::{evaluate, init_run, run_strategy, EvalRow, IterRow, RunOptions, RunOutcome, RunRecord, TrainConfig, LR_DIVISOR};
pub use strategy::Strategy;

#[cfg(test)]
mod tests;
