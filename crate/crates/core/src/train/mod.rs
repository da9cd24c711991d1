//! Experiment pipeline: the four training regimes, Monte Carlo evaluation,
//! checkpoints and parameter sweeps.

mod config;
mod experiment;
mod sweep;

pub use config::{DataSource, ExperimentConfig, Regime};
pub use experiment::{
    evaluate, finetune, load_data, pretrain, run_experiment, run_seeds, Checkpoint, EpochRecord, Evaluation, Metrics,
    Phase, RunOutput, TrainArtifact,
};
pub use sweep::{sweep, Axis, SweepResult, SweepRow, SWEEP_HEADER};
