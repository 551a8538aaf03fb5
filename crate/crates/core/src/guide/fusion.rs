//! Additive fusion of broadcast guidance vectors into the encoder latent.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::layers::{multi_head_attention, AttentionWeights};
use crate::ndgrad::{Graph, NodeId, Tensor};
use crate::params::{Bound, ParamStore};

/// Where attention sits relative to the `D' -> D` projection, and whether it
/// attends within a modality (self) or across modalities (cross).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionVariant {
    None,
    SelfBefore,
    SelfAfter,
    CrossBefore,
    CrossAfter,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 5] = [
        FusionVariant::None,
        FusionVariant::SelfBefore,
        FusionVariant::SelfAfter,
        FusionVariant::CrossBefore,
        FusionVariant::CrossAfter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::None => "none",
            FusionVariant::SelfBefore => "self-before",
            FusionVariant::SelfAfter => "self-after",
            FusionVariant::CrossBefore => "cross-before",
            FusionVariant::CrossAfter => "cross-after",
        }
    }

    fn attends_before(self) -> bool {
        matches!(self, FusionVariant::SelfBefore | FusionVariant::CrossBefore)
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub variant: FusionVariant,
    pub heads: usize,
    /// Probability of zeroing each mask element during training.
    pub dropout: f64,
}

impl FusionConfig {
    pub fn validate(&self, guide_dim: usize, latent_dim: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1]", self.dropout)));
        }
        let attended = match self.variant {
            FusionVariant::None => return Ok(()),
            v if v.attends_before() => guide_dim,
            _ => latent_dim,
        };
        if self.heads == 0 || attended % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide the attended width {attended} of variant {}",
                self.heads, self.variant
            )));
        }
        Ok(())
    }
}

fn uniform(store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) {
    store.init_uniform(name, &[rows, cols], 1.0 / (rows as f64).sqrt(), rng);
}

/// `fuse.w_s`, `fuse.w_c` (`[D', D]`) plus per-modality attention blocks
/// `fuse.attn_s.*` / `fuse.attn_c.*` when the variant attends.
pub fn init_fusion_params(guide_dim: usize, latent_dim: usize, cfg: &FusionConfig, rng: &mut impl Rng) -> ParamStore {
    let mut s = ParamStore::new();
    uniform(&mut s, "fuse.w_s", guide_dim, latent_dim, rng);
    uniform(&mut s, "fuse.w_c", guide_dim, latent_dim, rng);
    if cfg.variant != FusionVariant::None {
        let width = if cfg.variant.attends_before() { guide_dim } else { latent_dim };
        for m in ["s", "c"] {
            for p in ["q", "k", "v", "o"] {
                uniform(&mut s, &format!("fuse.attn_{m}.w_{p}"), width, width, rng);
            }
        }
    }
    s
}

fn attention_weights(p: &Bound, modality: &str) -> AttentionWeights {
    let w = |x: &str| p[&format!("fuse.attn_{modality}.w_{x}")];
    AttentionWeights { w_q: w("q"), w_k: w("k"), w_v: w("v"), w_o: w("o") }
}

/// Binary modality masks, `[T', D]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionMasks {
    pub semantic: Tensor,
    pub contextual: Tensor,
}

impl FusionMasks {
    pub fn ones(frames: usize, dim: usize) -> Self {
        Self { semantic: Tensor::full(&[frames, dim], 1.0), contextual: Tensor::full(&[frames, dim], 1.0) }
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        Self { semantic: Tensor::zeros(&[frames, dim]), contextual: Tensor::zeros(&[frames, dim]) }
    }

    /// Each element is kept (1) with probability `1 - dropout`. No rescaling.
    pub fn sample(frames: usize, dim: usize, dropout: f64, rng: &mut impl Rng) -> Self {
        let mut draw = || {
            let data = (0..frames * dim).map(|_| if rng.gen::<f64>() < dropout { 0.0 } else { 1.0 }).collect();
            Tensor::new(&[frames, dim], data)
        };
        let semantic = draw();
        let contextual = draw();
        Self { semantic, contextual }
    }
}

/// Projected guidance offsets `(S', C')`, each `[T', D]`.
pub fn fusion_offsets(
    g: &mut Graph,
    s_tilde: NodeId,
    c_tilde: NodeId,
    cfg: &FusionConfig,
    p: &Bound,
) -> Result<(NodeId, NodeId)> {
    let (w_s, w_c) = (p["fuse.w_s"], p["fuse.w_c"]);
    let heads = cfg.heads;
    let out = match cfg.variant {
        FusionVariant::None => (g.matmul(s_tilde, w_s)?, g.matmul(c_tilde, w_c)?),
        FusionVariant::SelfBefore => {
            let a = multi_head_attention(g, s_tilde, s_tilde, &attention_weights(p, "s"), heads)?;
            let b = multi_head_attention(g, c_tilde, c_tilde, &attention_weights(p, "c"), heads)?;
            (g.matmul(a, w_s)?, g.matmul(b, w_c)?)
        }
        FusionVariant::CrossBefore => {
            let a = multi_head_attention(g, s_tilde, c_tilde, &attention_weights(p, "s"), heads)?;
            let b = multi_head_attention(g, c_tilde, s_tilde, &attention_weights(p, "c"), heads)?;
            (g.matmul(a, w_s)?, g.matmul(b, w_c)?)
        }
        FusionVariant::SelfAfter => {
            let ps = g.matmul(s_tilde, w_s)?;
            let pc = g.matmul(c_tilde, w_c)?;
            (
                multi_head_attention(g, ps, ps, &attention_weights(p, "s"), heads)?,
                multi_head_attention(g, pc, pc, &attention_weights(p, "c"), heads)?,
            )
        }
        FusionVariant::CrossAfter => {
            let ps = g.matmul(s_tilde, w_s)?;
            let pc = g.matmul(c_tilde, w_c)?;
            (
                multi_head_attention(g, ps, pc, &attention_weights(p, "s"), heads)?,
                multi_head_attention(g, pc, ps, &attention_weights(p, "c"), heads)?,
            )
        }
    };
    Ok(out)
}

/// `Z' = Z + S' * mask_S + C' * mask_C`.
pub fn fuse_latent(
    g: &mut Graph,
    z: NodeId,
    s_tilde: NodeId,
    c_tilde: NodeId,
    cfg: &FusionConfig,
    p: &Bound,
    masks: &FusionMasks,
) -> Result<NodeId> {
    let (frames, latent_dim) = (g.shape(z)[0], g.shape(z)[1]);
    let guide_dim = g.shape(s_tilde)[1];
    cfg.validate(guide_dim, latent_dim)?;
    for (name, node) in [("semantic", s_tilde), ("contextual", c_tilde)] {
        if g.shape(node) != [frames, guide_dim] {
            return Err(Error::Input(format!(
                "{name} guidance is {:?}, expected [{frames}, {guide_dim}]",
                g.shape(node)
            )));
        }
    }
    for m in [&masks.semantic, &masks.contextual] {
        if m.shape() != [frames, latent_dim] {
            return Err(Error::Input(format!("mask is {:?}, expected [{frames}, {latent_dim}]", m.shape())));
        }
    }
    let (s_off, c_off) = fusion_offsets(g, s_tilde, c_tilde, cfg, p)?;
    let ms = g.constant(masks.semantic.clone());
    let mc = g.constant(masks.contextual.clone());
    let s_off = g.mul(s_off, ms)?;
    let c_off = g.mul(c_off, mc)?;
    let z = g.add(z, s_off)?;
    Ok(g.add(z, c_off)?)
}
