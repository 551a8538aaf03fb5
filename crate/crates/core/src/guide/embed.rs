//! Guidance embedding sequences: the `FCEM` file format, a synthetic
//! generator that stands in for pretrained speech/text models, pooling and
//! broadcast.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::ByteReader;
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::spectral::{magnitude_frames, matmul, mel_filterbank};
use crate::types::Waveform;

const MAGIC: &[u8; 4] = b"FCEM";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 19;

/// Mel bands of the synthetic feature front end.
pub const SYNTH_MELS: usize = 16;
/// Length of one synthetic contextual segment, as a fraction `3/10` of a second.
const SEGMENT_TENTHS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingKind {
    /// Frame-level speech features.
    Semantic,
    /// Token-level text features with a summary row.
    Contextual,
}

impl EmbeddingKind {
    fn code(self) -> u8 {
        match self {
            EmbeddingKind::Semantic => 0,
            EmbeddingKind::Contextual => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    pub kind: EmbeddingKind,
    /// Row holding the sequence summary; meaningful for contextual sequences only.
    pub cls_index: usize,
    /// `[n, D']`
    pub matrix: Tensor,
}

impl EmbeddingSequence {
    pub fn new(kind: EmbeddingKind, cls_index: usize, matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::Input(format!("embeddings must be a matrix, got {:?}", matrix.shape())));
        }
        if !matrix.is_finite() {
            return Err(Error::Input("embedding rows contain non-finite values".into()));
        }
        if kind == EmbeddingKind::Contextual && cls_index >= matrix.rows() {
            return Err(Error::Input(format!("cls_index {cls_index} outside {} rows", matrix.rows())));
        }
        Ok(Self { kind, cls_index, matrix })
    }

    pub fn count(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.matrix.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(&(self.cls_index as u32).to_le_bytes());
        out.extend_from_slice(&(self.count() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for &v in self.matrix.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("FCEM", bytes);
        r.magic(MAGIC)?;
        let version = r.u16("version")?;
        if version != VERSION {
            return r.fail(4, format!("unsupported version {version}"));
        }
        let kind = match r.u8("kind")? {
            0 => EmbeddingKind::Semantic,
            1 => EmbeddingKind::Contextual,
            k => return r.fail(6, format!("unknown kind {k}")),
        };
        let cls_index = r.u32("cls_index")? as usize;
        let n = r.u32("row count")? as usize;
        let dim = r.u32("dim")? as usize;
        let expected = n.checked_mul(dim).and_then(|c| c.checked_mul(4));
        match expected {
            Some(e) if e == r.remaining() => {}
            _ => {
                return r.fail(
                    HEADER_LEN,
                    format!("payload of {} bytes does not hold {n} x {dim} f32 values", r.remaining()),
                )
            }
        }
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            let at = r.pos();
            let v = r.f32("value")?;
            if !v.is_finite() {
                return r.fail(at, "non-finite value");
            }
            data.push(v as f64);
        }
        r.finish()?;
        if kind == EmbeddingKind::Contextual && cls_index >= n {
            return r.fail(7, format!("cls_index {cls_index} outside {n} rows"));
        }
        Ok(Self { kind, cls_index, matrix: Tensor::new(&[n, dim], data) })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Log-mel features, one row per `hop` samples of the right-padded signal.
fn log_mel_frames(x: &Waveform, hop: usize) -> Tensor {
    let padded = x.padded_to(hop);
    let frames = padded.len() / hop;
    if frames == 0 {
        return Tensor::zeros(&[0, SYNTH_MELS]);
    }
    let mag = magnitude_frames(&padded, hop, hop).expect("padded signal holds whole frames");
    let fb = mel_filterbank(x.sample_rate, hop, SYNTH_MELS);
    matmul(&mag, &fb).map(|m| (1e-3 + m).log10())
}

fn projection(seed: u64, kind: EmbeddingKind, dim: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(kind.code() as u64 + 1);
    let bound = 1.0 / (SYNTH_MELS as f64).sqrt();
    let data = (0..SYNTH_MELS * dim).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(&[SYNTH_MELS, dim], data)
}

/// Rounds to `f32` precision so that a saved file reloads to the same values.
fn to_f32_grid(t: Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

/// Number of synthetic contextual rows: one per started 0.3 s plus the summary row.
pub fn contextual_rows(samples: usize, sample_rate: u32) -> usize {
    (10 * samples).div_ceil(SEGMENT_TENTHS * sample_rate as usize) + 1
}

/// Deterministic stand-in for pretrained guidance models.
///
/// Semantic: log-mel features per codec frame (`hop` samples) through a
/// seeded random projection to `dim`. Contextual: the same projection (with
/// a different seed stream) of log-mel features averaged over 0.3 s
/// segments, preceded by a summary row at index 0 that is the mean of the
/// segment rows.
pub fn synth_guidance(x: &Waveform, seed: u64, kind: EmbeddingKind, dim: usize, hop: usize) -> EmbeddingSequence {
    let feats = log_mel_frames(x, hop);
    let proj = projection(seed, kind, dim);
    match kind {
        EmbeddingKind::Semantic => EmbeddingSequence { kind, cls_index: 0, matrix: to_f32_grid(matmul(&feats, &proj)) },
        EmbeddingKind::Contextual => {
            let n = contextual_rows(x.len(), x.sample_rate);
            let segments = n - 1;
            let frames = feats.rows();
            let mut pooled = Tensor::zeros(&[segments, SYNTH_MELS]);
            for j in 0..segments {
                if frames == 0 {
                    break;
                }
                let lo = (j * frames / segments).min(frames - 1);
                let hi = ((j + 1) * frames / segments).max(lo + 1);
                let row = pooled.row_mut(j);
                for f in lo..hi {
                    for (o, v) in row.iter_mut().zip(feats.row(f)) {
                        *o += v / (hi - lo) as f64;
                    }
                }
            }
            let tokens = matmul(&pooled, &proj);
            let mut matrix = Tensor::zeros(&[n, dim]);
            let mut summary = vec![0.0; dim];
            for j in 0..segments {
                matrix.row_mut(j + 1).copy_from_slice(tokens.row(j));
                for (c, v) in summary.iter_mut().zip(tokens.row(j)) {
                    *c += v / segments as f64;
                }
            }
            matrix.row_mut(0).copy_from_slice(&summary);
            EmbeddingSequence { kind, cls_index: 0, matrix: to_f32_grid(matrix) }
        }
    }
}

/// Sequence-level summaries: mean semantic row and the contextual summary row.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalVectors {
    pub semantic: Vec<f64>,
    pub contextual: Vec<f64>,
}

pub fn pool_globals(semantic: &EmbeddingSequence, contextual: &EmbeddingSequence) -> Result<GlobalVectors> {
    if semantic.kind != EmbeddingKind::Semantic || contextual.kind != EmbeddingKind::Contextual {
        return Err(Error::Input("pool_globals needs a semantic and a contextual sequence".into()));
    }
    if semantic.count() == 0 {
        return Err(Error::Input("semantic sequence is empty".into()));
    }
    if semantic.dim() != contextual.dim() {
        return Err(Error::Input(format!("guidance dims differ: {} vs {}", semantic.dim(), contextual.dim())));
    }
    let m = semantic.count() as f64;
    let mut mean = vec![0.0; semantic.dim()];
    for r in 0..semantic.count() {
        for (o, v) in mean.iter_mut().zip(semantic.matrix.row(r)) {
            *o += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    Ok(GlobalVectors { semantic: mean, contextual: contextual.matrix.row(contextual.cls_index).to_vec() })
}

/// `frames` identical copies of `v`, `[frames, len(v)]`.
pub fn broadcast(v: &[f64], frames: usize) -> Tensor {
    let data = (0..frames).flat_map(|_| v.iter().copied()).collect();
    Tensor::new(&[frames, v.len()], data)
}
