//! Semantic and contextual guidance: embeddings, latent fusion, and the
//! distillation losses with their window-based alignment.

mod distill;
mod embed;
mod fusion;

pub use distill::{
    align_windows, cosine, distill_aligned, distill_aligned_node, distill_global, distill_global_node, project_tokens,
    supervised_tokens, AlignedTargets, GuidanceModality, SupervisionDepth, WindowMode,
};
pub use embed::{
    broadcast, contextual_rows, pool_globals, synth_guidance, EmbeddingKind, EmbeddingSequence, GlobalVectors,
    SYNTH_MELS,
};
pub use fusion::{fuse_latent, fusion_offsets, init_fusion_params, FusionConfig, FusionMasks, FusionVariant};
