//! Loss, optimizers, learning-rate schedules and batch scaling rules.

mod loss;
mod optimizer;
mod schedule;

pub use loss::{batch_triplet_loss, euclidean, triplet_loss_value, triplet_margin_loss, LossSpec};
pub use optimizer::{Optimizer, OptimizerKind, OptimizerSpec, ADADELTA_RHO};
pub use schedule::{scale_lr, scheduler_value, ScalingRule, SchedulerKind, SchedulerSpec};
