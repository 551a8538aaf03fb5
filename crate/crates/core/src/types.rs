//! Data carried between the codec stages.

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

/// Mono waveform in `[-1, 1]`-ish floating point.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

impl Waveform {
    pub fn new(sample_rate: u32, samples: Vec<f64>) -> Self {
        Self { sample_rate, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Zero-pads on the right up to a multiple of `hop`.
    pub fn padded_to(&self, hop: usize) -> Vec<f64> {
        let mut s = self.samples.clone();
        let frames = s.len().div_ceil(hop);
        s.resize(frames * hop, 0.0);
        s
    }
}

/// `T' x D` matrix of frame vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence(pub Tensor);

impl LatentSequence {
    pub fn new(matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::Input(format!("latent must be a matrix, got shape {:?}", matrix.shape())));
        }
        Ok(Self(matrix))
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        Self(Tensor::zeros(&[frames, dim]))
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.0
    }
}

/// `K x T'` codebook indices, layer-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub codebook_size: usize,
    pub codes: Vec<Vec<u32>>,
}

impl TokenSequence {
    pub fn layers(&self) -> usize {
        self.codes.len()
    }

    pub fn frames(&self) -> usize {
        self.codes.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.frames();
        for (k, layer) in self.codes.iter().enumerate() {
            if layer.len() != t {
                return Err(Error::Input(format!("layer {k} has {} frames, expected {t}", layer.len())));
            }
            if let Some(&c) = layer.iter().find(|&&c| c as usize >= self.codebook_size) {
                return Err(Error::Input(format!(
                    "code {c} in layer {k} outside codebook of size {}",
                    self.codebook_size
                )));
            }
        }
        Ok(())
    }
}
