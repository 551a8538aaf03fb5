//! Residual vector quantizer with EMA codebooks.
//!
//! Layer `k` quantizes what layers `< k` left over. Codebooks are not trained
//! by gradient; they track an exponential moving average of the vectors
//! assigned to them, and rows that go unused are re-seeded from the batch.

use rand::Rng;

use super::config::CodecConfig;
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::types::{LatentSequence, TokenSequence};

#[derive(Clone, Debug, PartialEq)]
pub struct CodebookLayer {
    /// `[size, D]`
    pub codebook: Tensor,
    pub ema_count: Vec<f64>,
    /// `[size, D]`
    pub ema_sum: Tensor,
    /// Assignments since the last dead-code pass.
    pub usage: Vec<u64>,
}

impl CodebookLayer {
    /// EMA statistics start as if each row had been seen once at its current value.
    pub fn from_codebook(codebook: Tensor) -> Self {
        let size = codebook.rows();
        Self { ema_count: vec![1.0; size], ema_sum: codebook.clone(), usage: vec![0; size], codebook }
    }

    pub fn size(&self) -> usize {
        self.codebook.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerState {
    pub layers: Vec<CodebookLayer>,
    pub ema_decay: f64,
    pub laplace_eps: f64,
}

impl QuantizerState {
    /// Rows drawn from `U(-1/size, 1/size)`.
    pub fn new(cfg: &CodecConfig, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / cfg.codebook_size as f64;
        let layers = (0..cfg.codebook_count)
            .map(|_| {
                let n = cfg.codebook_size * cfg.embed_dim;
                let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
                CodebookLayer::from_codebook(Tensor::new(&[cfg.codebook_size, cfg.embed_dim], data))
            })
            .collect();
        Self { layers, ema_decay: cfg.ema_decay, laplace_eps: cfg.laplace_eps }
    }

    pub fn from_codebooks(codebooks: Vec<Tensor>, ema_decay: f64, laplace_eps: f64) -> Self {
        Self { layers: codebooks.into_iter().map(CodebookLayer::from_codebook).collect(), ema_decay, laplace_eps }
    }

    pub fn dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.codebook.cols())
    }

    pub fn codebook_size(&self) -> usize {
        self.layers.first().map_or(0, CodebookLayer::size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RvqOutput {
    pub tokens: TokenSequence,
    /// `Q^(k)`: the chosen codebook row per frame, per layer, `[T', D]`.
    pub layer_embeddings: Vec<Tensor>,
    /// Residual each layer quantized (`r_k`), `[T', D]`.
    pub residual_inputs: Vec<Tensor>,
    pub q_sum: LatentSequence,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest row in Euclidean distance; ties go to the lowest index.
pub fn nearest_row(codebook: &Tensor, v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for r in 0..codebook.rows() {
        let d = sq_dist(codebook.row(r), v);
        if d < best_d {
            best_d = d;
            best = r;
        }
    }
    best
}

pub fn rvq_quantize(z: &LatentSequence, state: &QuantizerState) -> Result<RvqOutput> {
    if state.layers.is_empty() || state.codebook_size() == 0 {
        return Err(Error::Input("quantizer has no codebook rows".into()));
    }
    if z.dim() != state.dim() {
        return Err(Error::Input(format!("latent dim {} does not match codebook dim {}", z.dim(), state.dim())));
    }
    let (frames, dim) = (z.frames(), z.dim());
    let mut residual = z.matrix().clone();
    let mut q_sum = Tensor::zeros(&[frames, dim]);
    let mut codes = Vec::with_capacity(state.layers.len());
    let mut layer_embeddings = Vec::with_capacity(state.layers.len());
    let mut residual_inputs = Vec::with_capacity(state.layers.len());
    for layer in &state.layers {
        let mut chosen = Tensor::zeros(&[frames, dim]);
        let mut layer_codes = Vec::with_capacity(frames);
        for t in 0..frames {
            let idx = nearest_row(&layer.codebook, residual.row(t));
            layer_codes.push(idx as u32);
            chosen.row_mut(t).copy_from_slice(layer.codebook.row(idx));
        }
        residual_inputs.push(residual.clone());
        residual = residual.zip_map(&chosen, |r, c| r - c);
        q_sum.accumulate(&chosen);
        codes.push(layer_codes);
        layer_embeddings.push(chosen);
    }
    Ok(RvqOutput {
        tokens: TokenSequence { codebook_size: state.codebook_size(), codes },
        layer_embeddings,
        residual_inputs,
        q_sum: LatentSequence(q_sum),
    })
}

/// Sums the selected rows of every layer, in layer order.
pub fn rvq_dequantize(tokens: &TokenSequence, state: &QuantizerState) -> Result<LatentSequence> {
    if tokens.layers() > state.layers.len() {
        return Err(Error::Input(format!(
            "{} token layers but only {} codebooks",
            tokens.layers(),
            state.layers.len()
        )));
    }
    let frames = tokens.frames();
    let dim = state.dim();
    let mut q_sum = Tensor::zeros(&[frames, dim]);
    for (layer, codes) in state.layers.iter().zip(&tokens.codes) {
        if codes.len() != frames {
            return Err(Error::Input("ragged token sequence".into()));
        }
        for (t, &c) in codes.iter().enumerate() {
            let c = c as usize;
            if c >= layer.size() {
                return Err(Error::Input(format!("code {c} outside codebook of size {}", layer.size())));
            }
            for (o, v) in q_sum.row_mut(t).iter_mut().zip(layer.codebook.row(c)) {
                *o += v;
            }
        }
    }
    Ok(LatentSequence(q_sum))
}

/// One EMA step per layer:
/// `count <- g*count + (1-g)*n`, `sum <- g*sum + (1-g)*sum(assigned)`,
/// `row <- sum / (count + eps)`.
pub fn ema_update(state: &mut QuantizerState, assignments: &[Vec<u32>], residual_inputs: &[Tensor]) -> Result<()> {
    if assignments.len() != state.layers.len() || residual_inputs.len() != state.layers.len() {
        return Err(Error::Input(format!(
            "EMA update for {} layers got {} assignment lists and {} residual sets",
            state.layers.len(),
            assignments.len(),
            residual_inputs.len()
        )));
    }
    let dim = state.dim();
    for (k, ((layer, codes), vectors)) in state.layers.iter_mut().zip(assignments).zip(residual_inputs).enumerate() {
        if vectors.rank() != 2 || vectors.cols() != dim || vectors.rows() != codes.len() {
            return Err(Error::Input(format!(
                "layer {k}: {} assignments against residuals of shape {:?}",
                codes.len(),
                vectors.shape()
            )));
        }
        let size = layer.size();
        let mut counts = vec![0.0; size];
        let mut sums = Tensor::zeros(&[size, dim]);
        for (t, &c) in codes.iter().enumerate() {
            let c = c as usize;
            if c >= size {
                return Err(Error::Input(format!("layer {k}: code {c} outside codebook")));
            }
            counts[c] += 1.0;
            for (s, v) in sums.row_mut(c).iter_mut().zip(vectors.row(t)) {
                *s += v;
            }
        }
        let g = state.ema_decay;
        for r in 0..size {
            layer.ema_count[r] = g * layer.ema_count[r] + (1.0 - g) * counts[r];
            layer.usage[r] += counts[r] as u64;
            let denom = layer.ema_count[r] + state.laplace_eps;
            let (sum_row, new_row) = (layer.ema_sum.row_mut(r), sums.row(r));
            for (s, n) in sum_row.iter_mut().zip(new_row) {
                *s = g * *s + (1.0 - g) * n;
            }
            let sum_row = layer.ema_sum.row(r).to_vec();
            for (c, s) in layer.codebook.row_mut(r).iter_mut().zip(&sum_row) {
                *c = s / denom;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ResampleReport {
    /// `(layer, row)` pairs that were replaced.
    pub replaced: Vec<(usize, usize)>,
    /// Set when no batch vectors were available; nothing was changed.
    pub empty_batch: bool,
}

/// Replaces every row used fewer than `usage_threshold` times since the last
/// call with a uniformly drawn vector from that layer's batch, then resets
/// the usage counters. Replaced rows restart their EMA statistics at the new
/// value with unit count.
pub fn resample_dead_codes(
    state: &mut QuantizerState,
    batch_vectors: &[Tensor],
    usage_threshold: u64,
    rng: &mut impl Rng,
) -> ResampleReport {
    let mut report = ResampleReport::default();
    if batch_vectors.len() != state.layers.len() || batch_vectors.iter().any(|b| b.rank() != 2 || b.rows() == 0) {
        log::warn!("dead-code resampling skipped: empty or mismatched batch");
        report.empty_batch = true;
        return report;
    }
    for (k, (layer, batch)) in state.layers.iter_mut().zip(batch_vectors).enumerate() {
        for r in 0..layer.size() {
            if layer.usage[r] >= usage_threshold {
                continue;
            }
            let pick = rng.gen_range(0..batch.rows());
            let v = batch.row(pick).to_vec();
            layer.codebook.row_mut(r).copy_from_slice(&v);
            layer.ema_sum.row_mut(r).copy_from_slice(&v);
            layer.ema_count[r] = 1.0;
            report.replaced.push((k, r));
        }
        layer.usage.iter_mut().for_each(|u| *u = 0);
    }
    report
}
