//! Reconstruction and commitment losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::layers::{mean_abs_diff, mean_sq_diff};
use crate::ndgrad::{Graph, NodeId, Tensor};
use crate::spectral::mel_filterbank;
use crate::types::Waveform;

/// Guard inside the spectral magnitude `sqrt(re^2 + im^2 + eps)`.
pub const MAG_EPS: f64 = 1e-12;

/// Mel spectrogram resolutions: window `2^i`, hop `2^i / 4`, for each `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelScales {
    pub exponents: Vec<u32>,
    pub mels: usize,
}

impl MelScales {
    pub fn paper() -> Self {
        Self { exponents: (5..=11).collect(), mels: 64 }
    }

    pub fn desk() -> Self {
        Self { exponents: (5..=8).collect(), mels: 16 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.exponents.is_empty() {
            return Err(Error::Config("no mel scales configured".into()));
        }
        if self.exponents.iter().any(|&i| !(2..=16).contains(&i)) || self.mels == 0 {
            return Err(Error::Config(format!("bad mel scales {:?} / {} bands", self.exponents, self.mels)));
        }
        Ok(())
    }
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Input(format!("signal lengths differ: {a} vs {b}")));
    }
    Ok(())
}

/// `mean |x - x_hat|`
pub fn loss_time_node(g: &mut Graph, x: NodeId, x_hat: NodeId) -> Result<NodeId> {
    same_len(g.value(x).len(), g.value(x_hat).len())?;
    Ok(mean_abs_diff(g, x, x_hat)?)
}

fn mel_node(g: &mut Graph, x: NodeId, window: usize, fb: NodeId) -> Result<NodeId> {
    let spec = g.dft(x, window, window / 4)?;
    let mag = g.complex_magnitude(spec, MAG_EPS)?;
    Ok(g.matmul(mag, fb)?)
}

/// Sum over scales of `mean|M - M_hat| + mean (M - M_hat)^2` on mel
/// magnitudes. Scales whose window exceeds the signal are dropped with a
/// warning; it is an error if none remain.
pub fn loss_freq_node(
    g: &mut Graph,
    x: NodeId,
    x_hat: NodeId,
    scales: &MelScales,
    sample_rate: u32,
) -> Result<NodeId> {
    let n = g.value(x).len();
    same_len(n, g.value(x_hat).len())?;
    if scales.exponents.is_empty() {
        return Err(Error::Input("no mel scales given".into()));
    }
    let mut terms = Vec::new();
    for &i in &scales.exponents {
        let window = 1usize << i;
        if n < window {
            log::warn!("mel scale 2^{i} dropped: signal of {n} samples is shorter than the window");
            continue;
        }
        let fb = g.constant(mel_filterbank(sample_rate, window, scales.mels));
        let a = mel_node(g, x, window, fb)?;
        let b = mel_node(g, x_hat, window, fb)?;
        let l1 = mean_abs_diff(g, a, b)?;
        let l2 = mean_sq_diff(g, a, b)?;
        terms.push(g.add(l1, l2)?);
    }
    let Some((&first, rest)) = terms.split_first() else {
        return Err(Error::Input(format!("signal of {n} samples is shorter than every mel window")));
    };
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Commitment penalty with the quantizer outputs held constant:
/// `sum_k mean_t |z_t - sum_{j<=k} c_{j,t}|^2`, i.e. each layer's residual
/// input minus its chosen row. Only `z_fused` receives gradient.
pub fn loss_commit_node(g: &mut Graph, z_fused: NodeId, layer_embeddings: &[Tensor]) -> Result<NodeId> {
    if layer_embeddings.is_empty() {
        return Err(Error::Input("commitment loss needs at least one layer".into()));
    }
    let frames = g.shape(z_fused)[0];
    if frames == 0 {
        return Err(Error::Input("commitment loss over zero frames".into()));
    }
    let mut cum = Tensor::zeros(g.shape(z_fused));
    let mut acc: Option<NodeId> = None;
    for (k, c) in layer_embeddings.iter().enumerate() {
        if c.shape() != cum.shape() {
            return Err(Error::Input(format!("layer {k} embeddings {:?} vs latent {:?}", c.shape(), cum.shape())));
        }
        cum.accumulate(c);
        let target = g.constant(cum.clone());
        let d = g.sub(z_fused, target)?;
        let d = g.square(d)?;
        let s = g.sum(d)?;
        let term = g.scale(s, 1.0 / frames as f64)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc.expect("at least one layer"))
}

pub fn loss_time(x: &Waveform, x_hat: &Waveform) -> Result<f64> {
    same_len(x.len(), x_hat.len())?;
    if x.is_empty() {
        return Err(Error::Input("empty signals".into()));
    }
    Ok(x.samples.iter().zip(&x_hat.samples).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

pub fn loss_freq(x: &Waveform, x_hat: &Waveform, scales: &MelScales) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.try_constant(Tensor::new(&[1, x.len()], x.samples.clone()))?;
    let b = g.try_constant(Tensor::new(&[1, x_hat.len()], x_hat.samples.clone()))?;
    let l = loss_freq_node(&mut g, a, b, scales, x.sample_rate)?;
    Ok(g.value(l).item())
}

/// `sum_j mean_t |r_{j,t} - c_{j,t}|^2` from per-layer residual inputs and chosen rows.
pub fn loss_commit(residual_inputs: &[Tensor], chosen: &[Tensor]) -> Result<f64> {
    if residual_inputs.len() != chosen.len() || chosen.is_empty() {
        return Err(Error::Input(format!("{} residual layers vs {} chosen layers", residual_inputs.len(), chosen.len())));
    }
    let mut total = 0.0;
    for (r, c) in residual_inputs.iter().zip(chosen) {
        if r.shape() != c.shape() || r.rank() != 2 || r.rows() == 0 {
            return Err(Error::Input(format!("residual {:?} vs chosen {:?}", r.shape(), c.shape())));
        }
        let sq: f64 = r.data().iter().zip(c.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        total += sq / r.rows() as f64;
    }
    Ok(total)
}
