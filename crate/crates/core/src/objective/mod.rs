//! Training objective, optimizer and training loop.

mod adam;
mod checkpoint;
mod recon;
mod total;
mod train;

pub use adam::{adam_step, AdamConfig, AdamMoments};
pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use recon::{
    loss_commit, loss_commit_node, loss_freq, loss_freq_node, loss_time, loss_time_node, MelScales, MAG_EPS,
};
pub use total::{total_loss, LossBreakdown, LossComponents, LossWeights, Variant};
pub use train::{
    add_adversarial, default_modality, derived_rng, generator_pass, objective_graph, sample_batch, train_step,
    weighted_total_node, AdversarialTerms, Crop, GeneratorPass, TrainClip, TrainConfig, TrainState, DISTILL_PROJECTION,
};
