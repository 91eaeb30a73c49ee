//! Trajectory harvesting and distillation of the joint sampler.

pub(crate) mod distill;
mod trajectories;

pub use distill::{
    distill_gradients, distill_loss, evaluate_distill, train_sampler, write_metrics_csv, DataSource, FeedTag,
    LossPositions, LossReport, MetricsHistory, MetricsRow, TrainConfig,
};
pub use trajectories::{
    build_samples, harvest_trajectories, read_samples, read_trajectories, write_samples,
    write_trajectories, Trajectory, TrajectorySample,
};
