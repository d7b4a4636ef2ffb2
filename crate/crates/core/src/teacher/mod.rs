//! Synthetic data and masked-diffusion teacher training.

pub mod dataset;
mod train;

pub use dataset::{DatasetSpec, PairTable, SyntheticDataset};
pub use train::{
    draw_condition, mdm_loss, mdm_loss_on_tape, train_teacher, TeacherOutcome, TeacherStepLog, TeacherTrainConfig,
    TeacherTrainer,
};
