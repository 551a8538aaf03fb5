//! Synthetic tone corpus with matched guidance embeddings.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::formats::{quantize_pcm16, read_wav, write_wav};
use crate::error::{Error, Result};
use crate::guide::{synth_guidance, EmbeddingKind, EmbeddingSequence};
use crate::objective::{derived_rng, TrainClip, TrainConfig};
use crate::types::Waveform;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub seed: u64,
    pub count: usize,
    pub duration_secs: f64,
    pub sample_rate: u32,
    pub guide_dim: usize,
    /// Codec hop; sets the semantic row rate.
    pub hop: usize,
}

/// Mixture of 2 to 4 sinusoids, each with its own slow amplitude
/// modulation, faded in and out over 10 ms and kept below 0.8 peak. The
/// result is already on the PCM16 grid.
pub fn synth_clip(seed: u64, index: u64, samples: usize, sample_rate: u32) -> Waveform {
    let mut rng = derived_rng(seed, "corpus.clip", index);
    let tones = rng.gen_range(2..=4);
    let params: Vec<[f64; 5]> = (0..tones)
        .map(|_| {
            [
                rng.gen_range(100.0..2000.0),
                rng.gen_range(0.1..0.4),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.5..4.0),
                rng.gen_range(0.0..2.0 * PI),
            ]
        })
        .collect();
    let sr = sample_rate as f64;
    let fade = (0.01 * sr).max(1.0);
    let mut x: Vec<f64> = (0..samples)
        .map(|i| {
            let t = i as f64 / sr;
            let edge = (i as f64 / fade).min((samples - i) as f64 / fade).min(1.0);
            let v: f64 = params
                .iter()
                .map(|&[f, a, ph, rate, mph]| {
                    let env = 0.6 + 0.4 * (2.0 * PI * rate * t + mph).sin();
                    a * env * (2.0 * PI * f * t + ph).sin()
                })
                .sum();
            edge * v
        })
        .collect();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.8 {
        x.iter_mut().for_each(|v| *v *= 0.8 / peak);
    }
    quantize_pcm16(&Waveform::new(sample_rate, x))
}

fn clip_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{name}.wav")),
        dir.join(format!("{name}.semantic.fcem")),
        dir.join(format!("{name}.contextual.fcem")),
    )
}

/// Writes `count` clips (WAV plus semantic and contextual embedding files)
/// and a manifest naming them. Returns the clip names.
pub fn make_synthetic_corpus(dir: &Path, spec: &CorpusSpec) -> Result<Vec<String>> {
    if !(spec.duration_secs > 0.0 && spec.duration_secs.is_finite()) {
        return Err(Error::Config(format!("duration {} s must be positive", spec.duration_secs)));
    }
    let samples = (spec.duration_secs * spec.sample_rate as f64).round() as usize;
    if samples < spec.hop {
        return Err(Error::Config(format!("{samples} samples per clip is less than one frame")));
    }
    fs::create_dir_all(dir)?;
    let mut manifest = format!(
        "# seed={} count={} duration_secs={} sample_rate={} guide_dim={} hop={}\n",
        spec.seed, spec.count, spec.duration_secs, spec.sample_rate, spec.guide_dim, spec.hop
    );
    let mut names = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let name = format!("clip_{i:04}");
        let wave = synth_clip(spec.seed, i as u64, samples, spec.sample_rate);
        let (wav, sem, ctx) = clip_paths(dir, &name);
        write_wav(&wave, &wav)?;
        synth_guidance(&wave, spec.seed, EmbeddingKind::Semantic, spec.guide_dim, spec.hop).save(&sem)?;
        synth_guidance(&wave, spec.seed, EmbeddingKind::Contextual, spec.guide_dim, spec.hop).save(&ctx)?;
        manifest.push_str(&name);
        manifest.push('\n');
        names.push(name);
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(names)
}

/// Loads every clip listed in the manifest and checks it against `cfg`.
pub fn load_corpus(dir: &Path, cfg: &TrainConfig) -> Result<Vec<TrainClip>> {
    let manifest = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::Input(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    let mut clips = Vec::new();
    for name in manifest.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (wav, sem, ctx) = clip_paths(dir, name);
        let clip = TrainClip {
            wave: read_wav(&wav, Some(cfg.codec.sample_rate_hz))?,
            semantic: EmbeddingSequence::load(&sem)?,
            contextual: EmbeddingSequence::load(&ctx)?,
        };
        clip.validate(cfg).map_err(|e| Error::Input(format!("clip {name}: {e}")))?;
        clips.push(clip);
    }
    Ok(clips)
}
