//! Convolutional encoder and decoder.
//!
//! Encoder: initial conv, then per stride a residual block followed by a
//! strided conv (kernel `2 * stride`) that doubles the channels, then a
//! two-layer bidirectional LSTM and a final conv to `D`. The decoder mirrors
//! it with transposed convs and a two-layer unidirectional LSTM.

use rand::Rng;

use super::config::CodecConfig;
use crate::error::{Error, Result};
use crate::ndgrad::layers::{lstm, LstmWeights};
use crate::ndgrad::{Conv1dSpec, ConvTranspose1dSpec, Graph, NodeId, Tensor};
use crate::params::{bind, Bound, ParamStore};
use crate::types::{LatentSequence, Waveform};

const RECURRENT_LAYERS: usize = 2;
const RES_KERNEL: usize = 3;

fn conv_param(store: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize, rng: &mut impl Rng) {
    let bound = 1.0 / ((cin * k) as f64).sqrt();
    store.init_uniform(format!("{name}.w"), &[cout, cin, k], bound, rng);
    store.init_zeros(format!("{name}.b"), &[cout]);
}

fn tconv_param(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) {
    let bound = 1.0 / ((cin * k) as f64).sqrt();
    store.init_uniform(format!("{name}.w"), &[cin, cout, k], bound, rng);
    store.init_zeros(format!("{name}.b"), &[cout]);
}

fn lstm_param(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) {
    let bound = 1.0 / (hidden as f64).sqrt();
    store.init_uniform(format!("{name}.w_ih"), &[input, 4 * hidden], bound, rng);
    store.init_uniform(format!("{name}.w_hh"), &[hidden, 4 * hidden], bound, rng);
    store.init_zeros(format!("{name}.b"), &[4 * hidden]);
}

fn lstm_weights(p: &Bound, name: &str) -> LstmWeights {
    LstmWeights { w_ih: p[&format!("{name}.w_ih")], w_hh: p[&format!("{name}.w_hh")], bias: p[&format!("{name}.b")] }
}

/// Encoder (`enc.*`) and decoder (`dec.*`) weights.
pub fn init_codec_params(cfg: &CodecConfig, rng: &mut impl Rng) -> ParamStore {
    let mut s = ParamStore::new();
    let c0 = cfg.base_channels;
    let k0 = cfg.initial_kernel;
    let top = cfg.top_channels();
    let d = cfg.embed_dim;

    conv_param(&mut s, "enc.in", c0, 1, k0, rng);
    for (i, &stride) in cfg.strides.iter().enumerate() {
        let c = c0 << i;
        conv_param(&mut s, &format!("enc.blk{i}.c1"), c, c, RES_KERNEL, rng);
        conv_param(&mut s, &format!("enc.blk{i}.c2"), c, c, RES_KERNEL, rng);
        conv_param(&mut s, &format!("enc.down{i}"), 2 * c, c, 2 * stride, rng);
    }
    let h = cfg.recurrent_hidden;
    for l in 0..RECURRENT_LAYERS {
        let input = if l == 0 { top } else { 2 * h };
        lstm_param(&mut s, &format!("enc.lstm{l}.fwd"), input, h, rng);
        lstm_param(&mut s, &format!("enc.lstm{l}.bwd"), input, h, rng);
    }
    conv_param(&mut s, "enc.out", d, d, k0, rng);

    conv_param(&mut s, "dec.in", top, d, k0, rng);
    for l in 0..RECURRENT_LAYERS {
        lstm_param(&mut s, &format!("dec.lstm{l}"), top, top, rng);
    }
    for (i, &stride) in cfg.strides.iter().enumerate() {
        let c = c0 << i;
        tconv_param(&mut s, &format!("dec.up{i}"), 2 * c, c, 2 * stride, rng);
        conv_param(&mut s, &format!("dec.blk{i}.c1"), c, c, RES_KERNEL, rng);
        conv_param(&mut s, &format!("dec.blk{i}.c2"), c, c, RES_KERNEL, rng);
    }
    conv_param(&mut s, "dec.out", 1, c0, k0, rng);
    s
}

fn conv(g: &mut Graph, x: NodeId, p: &Bound, name: &str, spec: Conv1dSpec) -> Result<NodeId> {
    Ok(g.conv1d(x, p[&format!("{name}.w")], p[&format!("{name}.b")], spec)?)
}

fn residual_block(g: &mut Graph, x: NodeId, p: &Bound, name: &str) -> Result<NodeId> {
    let y = g.elu(x)?;
    let y = conv(g, y, p, &format!("{name}.c1"), Conv1dSpec::same(RES_KERNEL))?;
    let y = g.elu(y)?;
    let y = conv(g, y, p, &format!("{name}.c2"), Conv1dSpec::same(RES_KERNEL))?;
    Ok(g.add(x, y)?)
}

fn down_spec(stride: usize) -> Conv1dSpec {
    Conv1dSpec { stride, dilation: 1, pad_left: stride / 2, pad_right: stride - stride / 2 }
}

/// `x` is `[1, N]` with `N` a multiple of the hop; returns `[T', D]`.
pub fn encoder_forward(g: &mut Graph, x: NodeId, cfg: &CodecConfig, p: &Bound) -> Result<NodeId> {
    let mut h = conv(g, x, p, "enc.in", Conv1dSpec::same(cfg.initial_kernel))?;
    for (i, &stride) in cfg.strides.iter().enumerate() {
        h = residual_block(g, h, p, &format!("enc.blk{i}"))?;
        h = g.elu(h)?;
        h = conv(g, h, p, &format!("enc.down{i}"), down_spec(stride))?;
    }
    let mut seq = g.transpose(h)?;
    for l in 0..RECURRENT_LAYERS {
        let fwd = lstm(g, seq, &lstm_weights(p, &format!("enc.lstm{l}.fwd")), false)?;
        let bwd = lstm(g, seq, &lstm_weights(p, &format!("enc.lstm{l}.bwd")), true)?;
        seq = g.concat(&[fwd, bwd], 1)?;
    }
    let seq = g.elu(seq)?;
    let h = g.transpose(seq)?;
    let h = conv(g, h, p, "enc.out", Conv1dSpec::same(cfg.initial_kernel))?;
    Ok(g.transpose(h)?)
}

/// `q` is `[T', D]`; returns `[1, T' * hop]`.
pub fn decoder_forward(g: &mut Graph, q: NodeId, cfg: &CodecConfig, p: &Bound) -> Result<NodeId> {
    let h = g.transpose(q)?;
    let h = conv(g, h, p, "dec.in", Conv1dSpec::same(cfg.initial_kernel))?;
    let mut seq = g.transpose(h)?;
    for l in 0..RECURRENT_LAYERS {
        seq = lstm(g, seq, &lstm_weights(p, &format!("dec.lstm{l}")), false)?;
    }
    let mut h = g.transpose(seq)?;
    for (i, &stride) in cfg.strides.iter().enumerate().rev() {
        h = g.elu(h)?;
        let len = g.shape(h)[1];
        let spec = ConvTranspose1dSpec { stride, crop_left: stride / 2, out_len: len * stride };
        h = g.conv_transpose1d(h, p[&format!("dec.up{i}.w")], p[&format!("dec.up{i}.b")], spec)?;
        h = residual_block(g, h, p, &format!("dec.blk{i}"))?;
    }
    let h = g.elu(h)?;
    conv(g, h, p, "dec.out", Conv1dSpec::same(cfg.initial_kernel))
}

pub(crate) fn check_waveform(x: &Waveform, cfg: &CodecConfig) -> Result<()> {
    if x.sample_rate != cfg.sample_rate_hz {
        return Err(Error::Input(format!("sample rate {} Hz, codec expects {} Hz", x.sample_rate, cfg.sample_rate_hz)));
    }
    if x.len() < cfg.hop() {
        return Err(Error::Input(format!("waveform of {} samples is shorter than one frame ({})", x.len(), cfg.hop())));
    }
    if let Some(i) = x.samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::Input(format!("non-finite sample at index {i}")));
    }
    Ok(())
}

/// Adds the right-padded waveform to `g` as a `[1, N]` constant.
pub fn waveform_node(g: &mut Graph, x: &Waveform, cfg: &CodecConfig) -> Result<NodeId> {
    check_waveform(x, cfg)?;
    let padded = x.padded_to(cfg.hop());
    let n = padded.len();
    Ok(g.constant(Tensor::new(&[1, n], padded)))
}

/// Inference-only encoder pass.
pub fn encode(x: &Waveform, cfg: &CodecConfig, params: &ParamStore) -> Result<LatentSequence> {
    let mut g = Graph::new();
    let p = bind(&mut g, &params.with_prefix("enc."), false)?;
    let xn = waveform_node(&mut g, x, cfg)?;
    let z = encoder_forward(&mut g, xn, cfg, &p)?;
    LatentSequence::new(g.value(z).clone())
}

/// Inference-only decoder pass.
pub fn decode(q: &LatentSequence, cfg: &CodecConfig, params: &ParamStore) -> Result<Waveform> {
    if q.dim() != cfg.embed_dim {
        return Err(Error::Input(format!("latent dim {} does not match codec dim {}", q.dim(), cfg.embed_dim)));
    }
    if q.frames() == 0 {
        return Err(Error::Input("cannot decode an empty latent sequence".into()));
    }
    let mut g = Graph::new();
    let p = bind(&mut g, &params.with_prefix("dec."), false)?;
    let qn = g.try_constant(q.matrix().clone())?;
    let y = decoder_forward(&mut g, qn, cfg, &p)?;
    Ok(Waveform::new(cfg.sample_rate_hz, g.value(y).data().to_vec()))
}
