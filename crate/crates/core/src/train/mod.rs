//! Optimizer, staged schedule, metrics and checkpoints.

pub mod checkpoint;
pub mod metrics;
pub mod optim;
pub mod schedule;

pub use checkpoint::{load_checkpoint, save_checkpoint, Metadata};
pub use metrics::{Confusion, MetricsReport};
pub use optim::{adam_step, OptimizerState};
pub use schedule::{evaluate, run_ablation, run_schedule, StageSchedule, TrainOutcome, Trainer};
