//! Objective, metrics, the optimization loop and evaluation.

mod loss;
mod metrics;
mod trainer;

pub use loss::{dialog_loss, estimate_loss, margin_loss, nll, LossBreakdown, LossVars};
pub use metrics::{ClassMetrics, TaskMetrics};
pub use trainer::{evaluate, train, EpochRecord, Evaluation, IgnoreLabels, StepMetrics, TrainConfig, TrainOutcome};
