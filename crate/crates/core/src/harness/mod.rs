//! Training, evaluation, checkpointing and analysis exports.

mod checkpoint;
mod config;
mod eval;
mod optim;
mod report;
mod spectrum;
mod train;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{StepDecay, TextSource, TrainConfig};
pub use eval::{
    eval_episodes, evaluate, infer_episode, zero_shot_infer, ClassIou, ClassKey, Confusion, Counts, EvalMode,
    EvalReport, EvalSettings, ZeroShotOutput,
};
pub use optim::AdamW;
pub use report::{param_count_report, ParamReport};
pub use spectrum::{
    high_band_fraction, magnitude_profile, morton_code, morton_order, spectrum, spectrum_csv, write_spectrum,
};
pub use train::{metrics_csv, train, write_outputs, MetricsRow, TrainOutcome, METRICS_HEADER};
