//! Adversarial training: losses, lazy R1, adaptive augmentation, learning
//! rate decay, generator EMA and the step/run drivers.

mod ada;
mod augment;
mod loss;
mod r1;
mod schedule;
mod trainer;

pub use ada::{ada_update, AdaConfig, AdaState};
pub use augment::{
    apply_augmentations, sample_augments, AugmentPlan, AugmentationPipelineConfig, BlitTransform, ColorTransform,
    GeometricTransform, ImageAugment,
};
pub use loss::{d_loss, g_loss};
pub use r1::{r1_param_grads, r1_penalty, AugmentedCritic, Critic};
pub use schedule::{lr_at, LrDecay};
pub use trainer::{gather, train, train_step, BatchSampler, StepMetrics, TrainConfig, TrainOutcome, TrainState};

/// Learning rate at the current point of a run.
pub fn lr_schedule(images_seen: u64, cfg: &TrainConfig) -> f32 {
    lr_at(cfg.lr_initial, &cfg.lr_decay, images_seen, cfg.total_images)
}
