//! Two-phase training, checkpoints, evaluation and sweeps.

mod adam;
mod checkpoint;
mod config;
mod sweep;
mod trainer;

pub use adam::{adam_step, scheduled_lr, Adam, BETA1, BETA2, EPSILON};
pub use checkpoint::{Checkpoint, OptimizerBlock, Phase, RngState, MAGIC, VERSION};
pub use config::{DataConfig, RunConfig, TrainConfig};
pub use sweep::{
    evaluate_bicubic, evaluate_l1, k_sweep, summarize_sweep, temperature_sweep, train_l1_baseline, SweepArm, SweepRow, DEFAULT_TEMPERATURES,
};
pub use trainer::{
    eval_rng, evaluate_flow, fit_pair, inject_noise, is_adversarial_model, load_dataset, mean_row, write_provenance,
    CurveRow, EvalRow, Trainer, CURVE_HEADER,
};
