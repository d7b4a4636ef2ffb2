//! One-step generator distillation from a masked-diffusion teacher.

mod engine;
mod init;
mod weight;

pub use engine::{
    divergence_targets, run_distillation, AuxStep, DistillConfig, DistillOutcome, DistillState, GeneratorStep,
    GradAudit, IterationLog, Targets,
};
pub use init::{generate_onestep, sample_init, sample_init_batch, InitStrategy, Placement};
pub use weight::{loss_weight, LossWeight, WeightMode};
