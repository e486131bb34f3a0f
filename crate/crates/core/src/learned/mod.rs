//! Learned score models: a small MLP trained by denoising score matching, and a
//! domain expert obtained by fine-tuning a copy of it.

pub mod dsm;
pub mod nn;

pub use dsm::{
    finetune_expert, finetune_expert_with, score_rms, train_dsm, train_dsm_with, LearnedScoreModel, LossPoint,
    TrainConfig, TrainingMeta,
};
