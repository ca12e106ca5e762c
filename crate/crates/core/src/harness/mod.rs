//! Run configuration, datasets, the training loop and the CLI subcommands.

pub mod commands;
pub mod config;
pub mod data;
pub mod train;

pub use commands::{analytic_table, load_dataset, run_hessian, run_probe, run_sweep, run_train, train_setup};
pub use config::{resolve_out, RunConfig, OUT_ENV};
pub use data::{load_csv, load_idx, synth_gaussian_classes, synth_regression, write_csv, Dataset, Task};
pub use train::{loss_and_grad, per_sample_grads, train, train_state, Loss, MetricsLog, RunStatus, TrainSetup, TrainSummary};
