//! Discriminator bank and adversarial losses.

mod bank;
mod loss;

pub use bank::{
    discriminate, discriminate_nodes, init_disc_params, DiscNodes, DiscOutput, Discriminator, DiscriminatorBank,
    FEATURE_LAYERS,
};
pub use loss::{disc_loss, disc_loss_node, feat_match_loss, feat_match_node, gen_loss, gen_loss_node, FEAT_EPS};
