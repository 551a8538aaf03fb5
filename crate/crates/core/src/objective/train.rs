//! Deterministic alternating generator/discriminator training.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::{adam_step, AdamConfig, AdamMoments};
use super::recon::{loss_commit_node, loss_freq_node, loss_time_node, MelScales};
use super::total::{total_loss, LossBreakdown, LossComponents, LossWeights, Variant};
use crate::advers::{
    disc_loss_node, discriminate, discriminate_nodes, feat_match_node, gen_loss_node, init_disc_params,
    DiscriminatorBank,
};
use crate::codec::{
    decoder_forward, ema_update, encoder_forward, init_codec_params, resample_dead_codes, rvq_quantize,
    straight_through, CodecConfig, Profile, QuantizerState, RvqOutput,
};
use crate::error::{Error, Result};
use crate::guide::{
    align_windows, broadcast, distill_aligned_node, distill_global_node, fuse_latent, init_fusion_params,
    pool_globals, project_tokens, supervised_tokens, AlignedTargets, EmbeddingKind, EmbeddingSequence, FusionConfig,
    FusionMasks, FusionVariant, GuidanceModality, SupervisionDepth, WindowMode,
};
use crate::ndgrad::layers::add_all;
use crate::ndgrad::{Graph, NodeId, Tensor};
use crate::params::{bind, ParamStore};
use crate::types::{LatentSequence, Waveform};

/// Name of the token projection used by the distillation losses, `[D, D']`.
pub const DISTILL_PROJECTION: &str = "distill.w";

/// Everything that shapes a training run apart from its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub codec: CodecConfig,
    pub bank: DiscriminatorBank,
    pub mel: MelScales,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    /// Width `D'` of the guidance embeddings.
    pub guide_dim: usize,
    pub fusion_variant: FusionVariant,
    pub heads: usize,
    pub dropout: f64,
    pub modality: GuidanceModality,
    pub window_mode: WindowMode,
    /// Alignment window; `None` derives it from the sequence lengths.
    pub window: Option<usize>,
    pub depth: SupervisionDepth,
    pub batch_size: usize,
    pub crop_samples: usize,
    /// Dead-code pass every this many steps; 0 disables it.
    pub resample_every: u64,
    pub dead_code_threshold: u64,
}

impl TrainConfig {
    pub fn desk(variant: Variant) -> Self {
        let codec = CodecConfig::desk();
        Self {
            variant,
            crop_samples: codec.sample_rate_hz as usize / 2,
            codec,
            bank: DiscriminatorBank::desk(),
            mel: MelScales::desk(),
            weights: LossWeights::default(),
            adam: AdamConfig::desk(),
            guide_dim: 16,
            fusion_variant: FusionVariant::CrossBefore,
            heads: 4,
            dropout: 0.1,
            modality: default_modality(variant),
            window_mode: WindowMode::Dynamic,
            window: None,
            depth: SupervisionDepth::First,
            batch_size: 2,
            resample_every: 25,
            dead_code_threshold: 1,
        }
    }

    pub fn paper(variant: Variant) -> Self {
        let codec = CodecConfig::paper();
        Self {
            crop_samples: codec.sample_rate_hz as usize * 3,
            codec,
            bank: DiscriminatorBank::paper(),
            mel: MelScales::paper(),
            adam: AdamConfig::paper(),
            guide_dim: 768,
            heads: 8,
            ..Self::desk(variant)
        }
    }

    pub fn for_profile(profile: Profile, variant: Variant) -> Self {
        match profile {
            Profile::Paper => Self::paper(variant),
            Profile::Desk => Self::desk(variant),
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig { variant: self.fusion_variant, heads: self.heads, dropout: self.dropout }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.bank.validate()?;
        self.mel.validate()?;
        self.weights.validate()?;
        self.adam.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.guide_dim == 0 {
            return fail("guide_dim must be positive".into());
        }
        if self.variant == Variant::Fusion {
            self.fusion().validate(self.guide_dim, self.codec.embed_dim)?;
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        let hop = self.codec.hop();
        if self.crop_samples == 0 || self.crop_samples % hop != 0 {
            return fail(format!("crop_samples {} must be a positive multiple of the hop {hop}", self.crop_samples));
        }
        if self.window == Some(0) {
            return fail("window must be at least 1".into());
        }
        Ok(())
    }
}

/// Context-aligned supervision defaults to the contextual rows alone; global
/// distillation compares against both modalities.
pub fn default_modality(variant: Variant) -> GuidanceModality {
    match variant {
        Variant::ContextAlign => GuidanceModality::Contextual,
        _ => GuidanceModality::SemanticContextual,
    }
}

/// A seeded stream for one purpose (`tag`) and one occasion (`index`).
pub fn derived_rng(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// One training clip with its guidance.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainClip {
    pub wave: Waveform,
    /// One row per codec frame.
    pub semantic: EmbeddingSequence,
    pub contextual: EmbeddingSequence,
}

impl TrainClip {
    pub fn validate(&self, cfg: &TrainConfig) -> Result<()> {
        let hop = cfg.codec.hop();
        if self.wave.sample_rate != cfg.codec.sample_rate_hz {
            return Err(Error::Input(format!(
                "clip sample rate {} differs from the codec's {}",
                self.wave.sample_rate, cfg.codec.sample_rate_hz
            )));
        }
        if self.wave.len() < hop {
            return Err(Error::Input(format!("clip of {} samples is shorter than one frame", self.wave.len())));
        }
        if self.semantic.kind != EmbeddingKind::Semantic || self.contextual.kind != EmbeddingKind::Contextual {
            return Err(Error::Input("clip guidance must be one semantic and one contextual sequence".into()));
        }
        let frames = cfg.codec.frames_for(self.wave.len());
        if self.semantic.count() != frames {
            return Err(Error::Input(format!(
                "clip has {frames} frames but {} semantic rows",
                self.semantic.count()
            )));
        }
        for s in [&self.semantic, &self.contextual] {
            if s.dim() != cfg.guide_dim {
                return Err(Error::Input(format!("guidance dim {} differs from guide_dim {}", s.dim(), cfg.guide_dim)));
            }
        }
        if self.contextual.count() == 0 {
            return Err(Error::Input("clip has no contextual rows".into()));
        }
        Ok(())
    }

    /// Frame-aligned excerpt of `frames` frames starting at frame `start`,
    /// with the matching semantic rows. Contextual rows stay whole.
    pub fn crop(&self, hop: usize, start: usize, frames: usize) -> Result<Crop> {
        let padded = self.wave.padded_to(hop);
        let total = padded.len() / hop;
        if start + frames > total || frames == 0 {
            return Err(Error::Input(format!("crop of frames {start}..{} outside 0..{total}", start + frames)));
        }
        let samples = padded[start * hop..(start + frames) * hop].to_vec();
        let dim = self.semantic.dim();
        let rows = self.semantic.matrix.data()[start * dim..(start + frames) * dim].to_vec();
        Ok(Crop {
            wave: Waveform::new(self.wave.sample_rate, samples),
            semantic: Tensor::new(&[frames, dim], rows),
            contextual: self.contextual.clone(),
        })
    }
}

/// A training excerpt as the objective sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub wave: Waveform,
    /// `[T', D']`
    pub semantic: Tensor,
    pub contextual: EmbeddingSequence,
}

impl Crop {
    fn frames(&self) -> usize {
        self.semantic.rows()
    }

    /// Time-broadcast semantic mean and contextual summary, each `[T', D']`.
    fn broadcast_globals(&self) -> Result<(Tensor, Tensor)> {
        let sem = EmbeddingSequence::new(EmbeddingKind::Semantic, 0, self.semantic.clone())?;
        let gv = pool_globals(&sem, &self.contextual)?;
        Ok((broadcast(&gv.semantic, self.frames()), broadcast(&gv.contextual, self.frames())))
    }
}

/// Parameters, optimizer moments and codebooks of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub seed: u64,
    /// Completed steps.
    pub step: u64,
    /// Optimizer updates dropped because of non-finite gradients.
    pub skipped: u64,
    /// Encoder, decoder and variant-specific weights.
    pub generator: ParamStore,
    pub discriminator: ParamStore,
    pub gen_moments: AdamMoments,
    pub disc_moments: AdamMoments,
    pub quantizer: QuantizerState,
}

impl TrainState {
    /// Each component draws from its own stream, so variants that share a
    /// component also share its initial weights.
    pub fn new(config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut generator = init_codec_params(&config.codec, &mut derived_rng(seed, "init.codec", 0));
        let quantizer = QuantizerState::new(&config.codec, &mut derived_rng(seed, "init.quantizer", 0));
        let discriminator = init_disc_params(&config.bank, &mut derived_rng(seed, "init.disc", 0));
        match config.variant {
            Variant::Fusion => generator.extend(init_fusion_params(
                config.guide_dim,
                config.codec.embed_dim,
                &config.fusion(),
                &mut derived_rng(seed, "init.fusion", 0),
            )),
            Variant::Distill | Variant::ContextAlign => {
                let d = config.codec.embed_dim;
                generator.init_uniform(
                    DISTILL_PROJECTION,
                    &[d, config.guide_dim],
                    1.0 / (d as f64).sqrt(),
                    &mut derived_rng(seed, "init.distill", 0),
                );
            }
            Variant::Baseline => {}
        }
        Ok(Self {
            config,
            seed,
            step: 0,
            skipped: 0,
            generator,
            discriminator,
            gen_moments: AdamMoments::default(),
            disc_moments: AdamMoments::default(),
            quantizer,
        })
    }
}

/// Generator-side graph for one crop, before the adversarial terms.
pub struct GeneratorPass {
    pub graph: Graph,
    /// The crop's waveform, also held by `x`.
    pub wave: Waveform,
    pub x: NodeId,
    pub x_hat: NodeId,
    pub time: NodeId,
    pub freq: NodeId,
    pub commit: NodeId,
    pub distill: Option<NodeId>,
    pub rvq: RvqOutput,
    pub alignment: Option<AlignedTargets>,
}

/// Builds the reconstruction, commitment and distillation terms for `crop`.
/// Generator weights are differentiable inputs; the quantizer output, the
/// alignment and `masks` are fixed at build time.
pub fn generator_pass(
    cfg: &TrainConfig,
    generator: &ParamStore,
    quantizer: &QuantizerState,
    crop: &Crop,
    masks: Option<&FusionMasks>,
) -> Result<GeneratorPass> {
    let mut g = Graph::new();
    let p = bind(&mut g, generator, true)?;
    let n = crop.wave.len();
    let x = g.try_constant(Tensor::new(&[1, n], crop.wave.samples.clone()))?;
    let z = encoder_forward(&mut g, x, &cfg.codec, &p)?;
    let frames = g.shape(z)[0];
    if frames != crop.frames() {
        return Err(Error::Input(format!("encoder gave {frames} frames for {} semantic rows", crop.frames())));
    }

    let z = if cfg.variant == Variant::Fusion {
        let (s, c) = crop.broadcast_globals()?;
        let s = g.try_constant(s)?;
        let c = g.try_constant(c)?;
        let ones;
        let masks = match masks {
            Some(m) => m,
            None => {
                ones = FusionMasks::ones(frames, cfg.codec.embed_dim);
                &ones
            }
        };
        fuse_latent(&mut g, z, s, c, &cfg.fusion(), &p, masks)?
    } else {
        z
    };

    let rvq = rvq_quantize(&LatentSequence::new(g.value(z).clone())?, quantizer)?;
    let q_sum = g.try_constant(rvq.q_sum.matrix().clone())?;
    let zq = straight_through(&mut g, z, q_sum)?;
    let commit = loss_commit_node(&mut g, z, &rvq.layer_embeddings)?;
    let x_hat = decoder_forward(&mut g, zq, &cfg.codec, &p)?;
    let time = loss_time_node(&mut g, x, x_hat)?;
    let freq = loss_freq_node(&mut g, x, x_hat, &cfg.mel, cfg.codec.sample_rate_hz)?;

    let mut alignment = None;
    let distill = if cfg.variant.has_distill() {
        let mut layers = Vec::with_capacity(rvq.layer_embeddings.len());
        for e in &rvq.layer_embeddings {
            let c = g.try_constant(e.clone())?;
            layers.push(straight_through(&mut g, z, c)?);
        }
        let q = supervised_tokens(&mut g, &layers, cfg.depth)?;
        let w = p[DISTILL_PROJECTION];
        Some(match cfg.variant {
            Variant::Distill => {
                let (s, c) = crop.broadcast_globals()?;
                let s = g.try_constant(s)?;
                let c = g.try_constant(c)?;
                distill_global_node(&mut g, q, w, s, c, cfg.modality)?
            }
            _ => {
                let q_proj = project_tokens(g.value(q), g.value(w))?;
                let targets = align_windows(&crop.contextual.matrix, &q_proj, cfg.window, cfg.window_mode)?;
                let c_star = g.try_constant(targets.c_star.clone())?;
                let semantic = match cfg.modality {
                    GuidanceModality::SemanticContextual => Some(g.try_constant(crop.semantic.clone())?),
                    GuidanceModality::Contextual => None,
                };
                alignment = Some(targets);
                distill_aligned_node(&mut g, q, w, c_star, semantic)?
            }
        })
    } else {
        None
    };

    Ok(GeneratorPass { graph: g, wave: crop.wave.clone(), x, x_hat, time, freq, commit, distill, rvq, alignment })
}

/// Adversarial node handles added to a [`GeneratorPass`].
pub struct AdversarialTerms {
    pub gen: NodeId,
    pub feat: NodeId,
}

/// Adds hinge and feature-matching terms; the discriminator is a constant.
pub fn add_adversarial(pass: &mut GeneratorPass, bank: &DiscriminatorBank, discriminator: &ParamStore) -> Result<AdversarialTerms> {
    let real = discriminate(&pass.wave, bank, discriminator)?;
    let g = &mut pass.graph;
    let p = bind(g, discriminator, false)?;
    let fake = discriminate_nodes(g, pass.x_hat, bank, &p)?;
    let scores: Vec<NodeId> = fake.iter().map(|d| d.score).collect();
    let gen = gen_loss_node(g, &scores)?;
    let real_feats: Vec<Vec<Tensor>> = real.into_iter().map(|d| d.features).collect();
    let fake_feats: Vec<Vec<NodeId>> = fake.into_iter().map(|d| d.features).collect();
    let feat = feat_match_node(g, &real_feats, &fake_feats)?;
    Ok(AdversarialTerms { gen, feat })
}

/// `sum lambda * term` over the terms the variant uses, in log column order.
pub fn weighted_total_node(
    g: &mut Graph,
    pass_terms: [NodeId; 5],
    distill: Option<NodeId>,
    weights: &LossWeights,
    variant: Variant,
) -> Result<NodeId> {
    let [time, freq, gen, feat, commit] = pass_terms;
    let mut terms = vec![
        g.scale(time, weights.time)?,
        g.scale(freq, weights.freq)?,
        g.scale(gen, weights.gen)?,
        g.scale(feat, weights.feat)?,
        g.scale(commit, weights.commit)?,
    ];
    if variant.has_distill() {
        if let Some(d) = distill {
            terms.push(g.scale(d, weights.distill)?);
        }
    }
    Ok(add_all(g, &terms)?)
}

/// The complete generator objective for one crop, ready for differentiation
/// with respect to the generator weights.
pub fn objective_graph(state: &TrainState, crop: &Crop, masks: Option<&FusionMasks>) -> Result<(Graph, NodeId)> {
    let cfg = &state.config;
    let mut pass = generator_pass(cfg, &state.generator, &state.quantizer, crop, masks)?;
    let adv = add_adversarial(&mut pass, &cfg.bank, &state.discriminator)?;
    let total = weighted_total_node(
        &mut pass.graph,
        [pass.time, pass.freq, adv.gen, adv.feat, pass.commit],
        pass.distill,
        &cfg.weights,
        cfg.variant,
    )?;
    Ok((pass.graph, total))
}

/// Picks `batch_size` clips (with replacement) and a frame-aligned crop of
/// each. Clips shorter than the crop length are used whole.
pub fn sample_batch(clips: &[TrainClip], cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Vec<Crop>> {
    if clips.is_empty() {
        return Err(Error::Input("no training clips".into()));
    }
    let hop = cfg.codec.hop();
    let want = cfg.crop_samples / hop;
    (0..cfg.batch_size)
        .map(|_| {
            let clip = &clips[rng.gen_range(0..clips.len())];
            let total = clip.wave.len().div_ceil(hop);
            let frames = want.min(total);
            let start = rng.gen_range(0..=total - frames);
            clip.crop(hop, start, frames)
        })
        .collect()
}

fn accumulate(into: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>) {
    for (name, g) in grads {
        match into.get_mut(&name) {
            Some(acc) => acc.accumulate(&g),
            None => {
                into.insert(name, g);
            }
        }
    }
}

fn averaged(mut grads: BTreeMap<String, Tensor>, count: usize) -> BTreeMap<String, Tensor> {
    let s = 1.0 / count as f64;
    for g in grads.values_mut() {
        *g = g.map(|v| v * s);
    }
    grads
}

fn stack_rows(parts: &[&Tensor]) -> Tensor {
    let cols = parts[0].cols();
    let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    let rows = data.len() / cols;
    Tensor::new(&[rows, cols], data)
}

/// One step: discriminator update on the detached reconstructions, then a
/// generator update against the updated discriminator, then codebook EMA and
/// (periodically) dead-code resampling.
pub fn train_step(state: &mut TrainState, clips: &[TrainClip]) -> Result<LossBreakdown> {
    let cfg = state.config.clone();
    let step = state.step;
    let t = step + 1;
    let batch = sample_batch(clips, &cfg, &mut derived_rng(state.seed, "batch", step))?;
    let count = batch.len();

    let mut passes = Vec::with_capacity(count);
    for (b, crop) in batch.iter().enumerate() {
        let masks = (cfg.variant == Variant::Fusion).then(|| {
            let mut rng = derived_rng(state.seed, "mask", step * cfg.batch_size as u64 + b as u64);
            FusionMasks::sample(crop.frames(), cfg.codec.embed_dim, cfg.dropout, &mut rng)
        });
        passes.push(generator_pass(&cfg, &state.generator, &state.quantizer, crop, masks.as_ref())?);
    }

    let mut disc_grads = BTreeMap::new();
    let mut disc_value = 0.0;
    for pass in &passes {
        let mut g = Graph::new();
        let p = bind(&mut g, &state.discriminator, true)?;
        let real = g.try_constant(pass.graph.value(pass.x).clone())?;
        let fake = g.try_constant(pass.graph.value(pass.x_hat).clone())?;
        let r = discriminate_nodes(&mut g, real, &cfg.bank, &p)?;
        let f = discriminate_nodes(&mut g, fake, &cfg.bank, &p)?;
        let rs: Vec<NodeId> = r.iter().map(|d| d.score).collect();
        let fs: Vec<NodeId> = f.iter().map(|d| d.score).collect();
        let loss = disc_loss_node(&mut g, &rs, &fs)?;
        disc_value += g.value(loss).item();
        accumulate(&mut disc_grads, g.gradient_all(loss)?);
    }
    let disc_grads = averaged(disc_grads, count);
    if !adam_step(&mut state.discriminator, &mut state.disc_moments, &disc_grads, t, &cfg.adam)? {
        state.skipped += 1;
    }

    let mut gen_grads = BTreeMap::new();
    let mut sums = LossComponents { distill: cfg.variant.has_distill().then_some(0.0), ..Default::default() };
    for pass in &mut passes {
        let adv = add_adversarial(pass, &cfg.bank, &state.discriminator)?;
        let g = &mut pass.graph;
        let total = weighted_total_node(
            g,
            [pass.time, pass.freq, adv.gen, adv.feat, pass.commit],
            pass.distill,
            &cfg.weights,
            cfg.variant,
        )?;
        sums.time += g.value(pass.time).item();
        sums.freq += g.value(pass.freq).item();
        sums.gen += g.value(adv.gen).item();
        sums.feat += g.value(adv.feat).item();
        sums.commit += g.value(pass.commit).item();
        if let (Some(acc), Some(d)) = (sums.distill.as_mut(), pass.distill) {
            *acc += g.value(d).item();
        }
        accumulate(&mut gen_grads, g.gradient_all(total)?);
    }
    let gen_grads = averaged(gen_grads, count);
    if !adam_step(&mut state.generator, &mut state.gen_moments, &gen_grads, t, &cfg.adam)? {
        state.skipped += 1;
    }

    let layers = state.quantizer.layers.len();
    let mut assignments = Vec::with_capacity(layers);
    let mut residuals = Vec::with_capacity(layers);
    for k in 0..layers {
        assignments.push(passes.iter().flat_map(|p| p.rvq.tokens.codes[k].iter().copied()).collect::<Vec<u32>>());
        residuals.push(stack_rows(&passes.iter().map(|p| &p.rvq.residual_inputs[k]).collect::<Vec<_>>()));
    }
    ema_update(&mut state.quantizer, &assignments, &residuals)?;
    if cfg.resample_every > 0 && t % cfg.resample_every == 0 {
        let mut rng = derived_rng(state.seed, "resample", step);
        let report = resample_dead_codes(&mut state.quantizer, &residuals, cfg.dead_code_threshold, &mut rng);
        if !report.replaced.is_empty() {
            log::debug!("step {t}: resampled {} dead codebook rows", report.replaced.len());
        }
    }

    let n = count as f64;
    let mean = LossComponents {
        time: sums.time / n,
        freq: sums.freq / n,
        gen: sums.gen / n,
        feat: sums.feat / n,
        commit: sums.commit / n,
        distill: sums.distill.map(|d| d / n),
    };
    let mut breakdown = total_loss(&mean, &cfg.weights, cfg.variant)?;
    breakdown.disc = disc_value / n;
    state.step = t;
    Ok(breakdown)
}
