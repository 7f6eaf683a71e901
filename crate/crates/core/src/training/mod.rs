//! Adversarial training of the generator against the discriminator.

mod loss;
mod schedule;
mod trainer;

pub use loss::{
    adversarial_label, bce_const, bce_const_graph, bce_prime, bce_prime_graph, bce_prime_with_weights, class_counts,
    class_weights, class_weights_from_counts, discriminator_losses, generator_loss, ClassWeights, DiscLosses, GenLoss,
    BCE_EPS, MIN_CLASS_WEIGHT,
};
pub use schedule::{lr_schedule, LrDecay};
pub use trainer::{
    train_run, EpochSummary, RunConfig, Start, StepReport, TrainConfig, TrainReport, TrainSample, Trainer,
    LOSS_LOG_HEADER,
};
