//! Class-incremental training harness and its metrics.

pub mod experiment;
pub mod gaussian;
pub mod metrics;
pub mod stream;
pub mod train;

pub use experiment::{
    median, pretrain_backbone, run_continual, with_epsilon, AblationStage, ContinualConfig,
    MetricsRecord, PretrainSpec, RunOutput,
};
pub use gaussian::{
    estimate_class_gaussian, estimate_class_gaussians, tap_refine, ClassGaussian,
    GaussianSampler, TapSettings,
};
pub use metrics::{faa_caa, AccuracyMatrix};
pub use stream::{generate_task_stream, Sample, StreamSpec, Task, TaskStream};
pub use train::{
    accuracy, batch_objective, eval_pass, evaluate, train_task, trainable, trainable_mut,
    BatchOutcome, CeScope, LearnerState, PhaseObjective, TaskReport, TrainHyper,
};
