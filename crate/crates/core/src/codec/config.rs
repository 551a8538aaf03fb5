use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected paper|desk)"))),
        }
    }
}

/// Shape of the encoder/decoder and the residual quantizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub sample_rate_hz: u32,
    pub base_channels: usize,
    pub initial_kernel: usize,
    /// Downsampling factor of each encoder block, in order.
    pub strides: Vec<usize>,
    /// Latent width `D`.
    pub embed_dim: usize,
    /// Number of residual quantization layers `K`.
    pub codebook_count: usize,
    pub codebook_size: usize,
    pub ema_decay: f64,
    pub laplace_eps: f64,
    /// Hidden size of each direction of the encoder's bidirectional LSTM.
    pub recurrent_hidden: usize,
    pub profile: Profile,
}

impl CodecConfig {
    /// 16 kHz, 50 Hz frames, D = 1024, eight codebooks of 1024 entries.
    pub fn paper() -> Self {
        Self {
            sample_rate_hz: 16_000,
            base_channels: 32,
            initial_kernel: 7,
            strides: vec![2, 4, 5, 8],
            embed_dim: 1024,
            codebook_count: 8,
            codebook_size: 1024,
            ema_decay: 0.99,
            laplace_eps: 1e-5,
            recurrent_hidden: 512,
            profile: Profile::Paper,
        }
    }

    /// Same frame rate as [`CodecConfig::paper`] at a size that trains on a laptop core.
    pub fn desk() -> Self {
        Self {
            base_channels: 4,
            embed_dim: 32,
            codebook_count: 4,
            codebook_size: 64,
            recurrent_hidden: 16,
            profile: Profile::Desk,
            ..Self::paper()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    /// Samples per latent frame.
    pub fn hop(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate_hz as f64 / self.hop() as f64
    }

    /// Latent frames produced for a waveform of `samples` samples.
    pub fn frames_for(&self, samples: usize) -> usize {
        samples.div_ceil(self.hop())
    }

    /// Channel width after the last downsampling block.
    pub fn top_channels(&self) -> usize {
        self.base_channels << self.strides.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.strides.is_empty() || self.strides.contains(&0) {
            return fail(format!("strides must be non-empty and positive, got {:?}", self.strides));
        }
        if self.codebook_count == 0 {
            return fail("codebook_count must be at least 1".into());
        }
        if self.codebook_size < 2 || self.codebook_size > 1 << 16 {
            return fail(format!("codebook_size {} outside [2, 65536]", self.codebook_size));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return fail(format!("ema_decay {} outside (0, 1)", self.ema_decay));
        }
        if self.laplace_eps <= 0.0 {
            return fail("laplace_eps must be positive".into());
        }
        if self.initial_kernel % 2 == 0 {
            return fail("initial_kernel must be odd".into());
        }
        if self.base_channels == 0 || self.embed_dim == 0 {
            return fail("channel widths must be positive".into());
        }
        if 2 * self.recurrent_hidden != self.embed_dim {
            return fail(format!(
                "recurrent_hidden {} must be half of embed_dim {}",
                self.recurrent_hidden, self.embed_dim
            ));
        }
        if self.sample_rate_hz as usize % self.hop() != 0 {
            return fail(format!("sample rate {} is not a multiple of hop {}", self.sample_rate_hz, self.hop()));
        }
        Ok(())
    }
}
