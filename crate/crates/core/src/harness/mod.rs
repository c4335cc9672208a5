//! Training, evaluation, and sweep drivers with their configuration,
//! optimizer, schedule, and checkpoint format.

mod checkpoint;
mod config;
mod diagnostics;
mod eval;
mod optim;
mod sweep;
mod train;

pub use checkpoint::{average_checkpoint_files, average_checkpoints, Checkpoint};
pub use config::RunConfig;
pub use diagnostics::{bench_attention, desk_check_item, desk_gradient_check, AttentionBench};
pub use eval::{
    default_conditions, load_model, run_eval, write_eval_report, Condition, ConditionResult,
    EvalOptions, EvalReport, NoiseCondition, UtteranceResult,
};
pub use optim::{clip_global_norm, lr_at, AdamW};
pub use sweep::{run_sweep, write_sweep_table, SweepRow};
pub use train::{
    feature_stats, greedy_wer, loss_options, noisy_logmel, run_train, EpochMetrics, TrainOutcome,
};
