//! A curvature-instrumented training laboratory for small neural networks.
//!
//! The crate provides a minimal reverse-mode differentiation core, Fisher
//! and Hessian trace probes, a family of gradient-norm regularizers, SGD
//! with momentum, synthetic and IDX datasets with a label-noise injector,
//! and an experiment harness that drives instrumented runs, sweeps, and
//! reports.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod curvature;
pub mod data;
pub mod error;
pub mod experiments;
pub mod harness;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod param;
pub mod reg;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod testing;

pub use autodiff::{
    finite_diff_grad, per_example_param_grads, value_and_input_grad, value_and_param_grad,
    GradOracle, Labels, ModelOracle,
};
pub use curvature::{
    empirical_fisher_trace, hvp_fd, tr_f_exact, tr_f_mc, tr_f_minibatch, tr_h_exact_small,
    tr_h_hutchinson, CurvatureEstimate, CurvatureKind, FixedBatchOracle, HvpConfig,
};
pub use data::{
    batch_iter, gen_gaussians, gen_spirals, inject_label_noise, load_flds, load_idx, save_flds,
    save_idx, split, Batch, Dataset, NoiseMask, NormStats,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{DataConfig, DataSource, ExperimentConfig, OptimConfig, ProbeConfig, RunConfig};
pub use experiments::{
    run_branch, run_delayed_start, run_noisy, run_sweep, summarize, BranchReport, DelayedStartReport,
    NoisyReport, SweepAxis, SweepReport,
};
pub use harness::{
    best_test_and_trh, evaluate, group_gradient_stats, prepare_data, run_train,
    run_train_with_init, trfi_from_log, GroupStats, PreparedData, RunSummary, TrainResult,
    TrfiOutcome,
};
pub use metrics::{read_csv, write_csv, MetricsRow, CSV_HEADER};
pub use optim::{lr_at, sgd_step, LrSchedule, SgdState};
pub use reg::{
    alpha_grid, mixup_batch, mixup_batch_with_lambda, penalty_grad, penalty_value,
    regularized_step_grad, sample_labels, LabelSource, PenaltyCache, PenaltyKind,
    RegularizerConfig, StepOutput, StepSeeds,
};
pub use error::{Error, Result};
pub use nets::{
    forward_logits, init_params, predict_and_accuracy, softmax_cross_entropy,
    softmax_cross_entropy_soft, Activation, InitScheme, LogitBatch, ModelKind, ModelSpec,
};
pub use param::{ParamEntry, ParamLayout, ParamVector};
pub use tensor::Tensor;
