//! Training, evaluation, checkpoints and the CSV exports behind the CLI.

pub mod checkpoint;
pub mod eval;
pub mod export;
pub mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use eval::{evaluate, mean, median, subsample, EvalOptions, EvalReport, Method, MethodRow};
pub use export::{
    cdf_csv, cdf_export, cdf_points, chain_export, parse_poses_csv, poses_csv, register_pair, uniform_grid,
    RegisterMethod, RegisterOptions, RegisterOutcome,
};
pub use train::{split_validation, train, EpochLog, TrainConfig, TrainOutcome};
