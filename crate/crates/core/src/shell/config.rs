//! Run configuration read from a flat `key = value` TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::Profile;
use crate::error::{Error, Result};
use crate::guide::{FusionVariant, GuidanceModality, SupervisionDepth, WindowMode};
use crate::objective::{TrainConfig, Variant};

/// Everything `train` needs. Unset overrides keep the profile defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub variant: Variant,
    pub seed: u64,
    pub steps: u64,
    /// Corpus directory holding `manifest.txt`.
    pub data: PathBuf,
    /// Where the final checkpoint is written.
    pub checkpoint: PathBuf,
    /// Where the per-step log is written.
    pub log: PathBuf,
    /// Continue from this checkpoint instead of initialising.
    pub resume: Option<PathBuf>,

    pub lambda_time: Option<f64>,
    pub lambda_freq: Option<f64>,
    pub lambda_gen: Option<f64>,
    pub lambda_feat: Option<f64>,
    pub lambda_commit: Option<f64>,
    pub lambda_distill: Option<f64>,
    pub fusion: Option<FusionVariant>,
    pub modality: Option<GuidanceModality>,
    pub window_mode: Option<WindowMode>,
    pub window: Option<usize>,
    pub dropout: Option<f64>,
    pub depth: Option<SupervisionDepth>,
    pub batch_size: Option<usize>,
    pub crop_samples: Option<usize>,
    pub learning_rate: Option<f64>,
}

impl RunConfig {
    /// Desk-profile defaults with the given paths.
    pub fn new(variant: Variant, seed: u64, steps: u64, data: PathBuf, checkpoint: PathBuf, log: PathBuf) -> Self {
        Self {
            profile: Profile::Desk,
            variant,
            seed,
            steps,
            data,
            checkpoint,
            log,
            resume: None,
            lambda_time: None,
            lambda_freq: None,
            lambda_gen: None,
            lambda_feat: None,
            lambda_commit: None,
            lambda_distill: None,
            fusion: None,
            modality: None,
            window_mode: None,
            window: None,
            dropout: None,
            depth: None,
            batch_size: None,
            crop_samples: None,
            learning_rate: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses `path`; relative paths inside are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data, &mut cfg.checkpoint, &mut cfg.log] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(r) = cfg.resume.as_mut().filter(|r| r.is_relative()) {
            *r = base.join(&*r);
        }
        Ok(cfg)
    }

    /// Profile defaults with every override applied, validated.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::for_profile(self.profile, self.variant);
        let w = &mut c.weights;
        for (slot, v) in [
            (&mut w.time, self.lambda_time),
            (&mut w.freq, self.lambda_freq),
            (&mut w.gen, self.lambda_gen),
            (&mut w.feat, self.lambda_feat),
            (&mut w.commit, self.lambda_commit),
            (&mut w.distill, self.lambda_distill),
        ] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        if let Some(v) = self.fusion {
            c.fusion_variant = v;
        }
        if let Some(v) = self.modality {
            c.modality = v;
        }
        if let Some(v) = self.window_mode {
            c.window_mode = v;
        }
        if self.window.is_some() {
            c.window = self.window;
        }
        if let Some(v) = self.dropout {
            c.dropout = v;
        }
        if let Some(v) = self.depth {
            c.depth = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.crop_samples {
            c.crop_samples = v;
        }
        if let Some(v) = self.learning_rate {
            c.adam.lr = v;
        }
        c.validate()?;
        Ok(c)
    }
}
