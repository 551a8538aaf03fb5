//! Oracles and fixtures shared by the integration suites and the acceptance
//! runner. Everything here is written independently of the library code it
//! checks.
#![allow(dead_code)]

pub mod criteria;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sctok::codec::CodebookLayer;
use sctok::guide::{synth_guidance, EmbeddingKind};
use sctok::advers::DiscriminatorBank;
use sctok::guide::FusionMasks;
use sctok::ndgrad::{
    finite_diff_check, finite_diff_check_with, Conv1dSpec, Conv2dSpec, ConvTranspose1dSpec, Coverage, FdOptions,
    GradCheckReport, Graph, NodeId, Stencil, Tensor,
};
use sctok::objective::{objective_graph, Crop, MelScales, TrainClip, TrainConfig, TrainState, Variant};
use sctok::shell::synth_clip;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Uniform in `[lo, hi)` with a random sign, so values stay clear of zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data)
}

// ---------------------------------------------------------------------------
// Per-op gradient cases

pub type Builder = fn(&mut Graph, &mut ChaCha8Rng) -> NodeId;

pub struct OpCase {
    pub name: &'static str,
    pub build: Builder,
}

fn inp(g: &mut Graph, name: &str, t: Tensor) -> NodeId {
    g.input(name, t).unwrap()
}

fn std_in(g: &mut Graph, r: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> NodeId {
    let t = uniform(r, shape, -1.0, 1.0);
    inp(g, name, t)
}

fn kinked_in(g: &mut Graph, r: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> NodeId {
    let t = away_from_zero(r, shape, 0.1, 1.5);
    inp(g, name, t)
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "add", build: |g, r| {
            let a = std_in(g, r, "a", &[3, 4]);
            let b = std_in(g, r, "b", &[3, 4]);
            g.add(a, b).unwrap()
        } },
        OpCase { name: "sub", build: |g, r| {
            let a = std_in(g, r, "a", &[3, 4]);
            let b = std_in(g, r, "b", &[3, 4]);
            g.sub(a, b).unwrap()
        } },
        OpCase { name: "mul", build: |g, r| {
            let a = std_in(g, r, "a", &[3, 4]);
            let b = std_in(g, r, "b", &[3, 4]);
            g.mul(a, b).unwrap()
        } },
        OpCase { name: "div", build: |g, r| {
            let a = std_in(g, r, "a", &[3, 4]);
            let t = away_from_zero(r, &[3, 4], 0.5, 2.0);
            let b = inp(g, "b", t);
            g.div(a, b).unwrap()
        } },
        OpCase { name: "neg", build: |g, r| {
            let a = std_in(g, r, "a", &[5]);
            g.neg(a).unwrap()
        } },
        OpCase { name: "scale", build: |g, r| {
            let a = std_in(g, r, "a", &[2, 3]);
            let c = r.gen_range(-3.0..3.0);
            g.scale(a, c).unwrap()
        } },
        OpCase { name: "add_scalar", build: |g, r| {
            let a = std_in(g, r, "a", &[2, 3]);
            let c = r.gen_range(-3.0..3.0);
            g.add_scalar(a, c).unwrap()
        } },
        OpCase { name: "abs", build: |g, r| {
            let a = kinked_in(g, r, "a", &[6]);
            g.abs(a).unwrap()
        } },
        OpCase { name: "square", build: |g, r| {
            let a = std_in(g, r, "a", &[6]);
            g.square(a).unwrap()
        } },
        OpCase { name: "sqrt", build: |g, r| {
            let t = uniform(r, &[6], 0.2, 3.0);
            let a = inp(g, "a", t);
            g.sqrt(a).unwrap()
        } },
        OpCase { name: "relu", build: |g, r| {
            let a = kinked_in(g, r, "a", &[8]);
            g.relu(a).unwrap()
        } },
        OpCase { name: "leaky_relu", build: |g, r| {
            let a = kinked_in(g, r, "a", &[8]);
            g.leaky_relu(a, 0.2).unwrap()
        } },
        OpCase { name: "elu", build: |g, r| {
            let a = kinked_in(g, r, "a", &[8]);
            g.elu(a).unwrap()
        } },
        OpCase { name: "sigmoid", build: |g, r| {
            let t = uniform(r, &[8], -4.0, 4.0);
            let a = inp(g, "a", t);
            g.sigmoid(a).unwrap()
        } },
        OpCase { name: "tanh", build: |g, r| {
            let t = uniform(r, &[8], -3.0, 3.0);
            let a = inp(g, "a", t);
            g.tanh(a).unwrap()
        } },
        OpCase { name: "log_sigmoid", build: |g, r| {
            let t = uniform(r, &[8], -6.0, 6.0);
            let a = inp(g, "a", t);
            g.log_sigmoid(a).unwrap()
        } },
        OpCase { name: "matmul", build: |g, r| {
            let a = std_in(g, r, "a", &[3, 4]);
            let b = std_in(g, r, "b", &[4, 2]);
            g.matmul(a, b).unwrap()
        } },
        OpCase { name: "transpose", build: |g, r| {
            let a = std_in(g, r, "a", &[3, 5]);
            g.transpose(a).unwrap()
        } },
        OpCase { name: "add_row_broadcast", build: |g, r| {
            let a = std_in(g, r, "a", &[4, 3]);
            let b = std_in(g, r, "b", &[3]);
            g.add_row_broadcast(a, b).unwrap()
        } },
        OpCase { name: "add_col_broadcast", build: |g, r| {
            let a = std_in(g, r, "a", &[4, 3]);
            let b = std_in(g, r, "b", &[4]);
            g.add_col_broadcast(a, b).unwrap()
        } },
        OpCase { name: "sum", build: |g, r| {
            let a = std_in(g, r, "a", &[3, 4]);
            let s = g.sum(a).unwrap();
            g.square(s).unwrap()
        } },
        OpCase { name: "mean", build: |g, r| {
            let a = std_in(g, r, "a", &[3, 4]);
            let s = g.mean(a).unwrap();
            g.square(s).unwrap()
        } },
        OpCase { name: "softmax", build: |g, r| {
            let t = uniform(r, &[3, 5], -2.0, 2.0);
            let a = inp(g, "a", t);
            g.softmax_rows(a).unwrap()
        } },
        OpCase { name: "cosine", build: |g, r| {
            let a = std_in(g, r, "a", &[4, 3]);
            let b = std_in(g, r, "b", &[4, 3]);
            g.row_cosine(a, b).unwrap()
        } },
        OpCase { name: "reshape", build: |g, r| {
            let a = std_in(g, r, "a", &[2, 6]);
            let b = g.reshape(a, &[3, 4]).unwrap();
            let c = std_in(g, r, "c", &[4, 2]);
            g.matmul(b, c).unwrap()
        } },
        OpCase { name: "concat", build: |g, r| {
            let axis = r.gen_range(0..2);
            let (sa, sb) = if axis == 0 { ([2, 3], [4, 3]) } else { ([3, 2], [3, 4]) };
            let a = std_in(g, r, "a", &sa);
            let b = std_in(g, r, "b", &sb);
            let c = std_in(g, r, "c", &sa);
            g.concat(&[a, b, c], axis).unwrap()
        } },
        OpCase { name: "slice", build: |g, r| {
            let axis = r.gen_range(0..3);
            let a = std_in(g, r, "a", &[4, 5, 3]);
            let n = [4, 5, 3][axis];
            let start = r.gen_range(0..n);
            let end = r.gen_range(start + 1..=n);
            g.slice(a, axis, start, end).unwrap()
        } },
        OpCase { name: "pad", build: |g, r| {
            let a = std_in(g, r, "a", &[2, 5]);
            let (left, right) = (r.gen_range(0..4), r.gen_range(0..4));
            g.pad_last(a, left, right).unwrap()
        } },
        OpCase { name: "avg_pool", build: |g, r| {
            let f = r.gen_range(1..4);
            let a = std_in(g, r, "a", &[2, 4 * f]);
            g.avg_pool_last(a, f).unwrap()
        } },
        OpCase { name: "conv1d", build: |g, r| {
            let k = r.gen_range(1..5);
            let spec = Conv1dSpec {
                stride: r.gen_range(1..3),
                dilation: r.gen_range(1..3),
                pad_left: r.gen_range(0..3),
                pad_right: r.gen_range(0..3),
            };
            let x = std_in(g, r, "x", &[3, 11]);
            let w = std_in(g, r, "w", &[2, 3, k]);
            let b = std_in(g, r, "b", &[2]);
            g.conv1d(x, w, b, spec).unwrap()
        } },
        OpCase { name: "conv_transpose1d", build: |g, r| {
            let stride = r.gen_range(1..4);
            let k = 2 * stride;
            let t = 5;
            let full = (t - 1) * stride + k;
            let crop_left = r.gen_range(0..=stride);
            let spec = ConvTranspose1dSpec { stride, crop_left, out_len: full - crop_left - r.gen_range(0..=stride) };
            let x = std_in(g, r, "x", &[3, t]);
            let w = std_in(g, r, "w", &[3, 2, k]);
            let b = std_in(g, r, "b", &[2]);
            g.conv_transpose1d(x, w, b, spec).unwrap()
        } },
        OpCase { name: "conv2d", build: |g, r| {
            let spec = Conv2dSpec {
                stride: (r.gen_range(1..3), r.gen_range(1..3)),
                dilation: (r.gen_range(1..3), r.gen_range(1..3)),
                pad: (r.gen_range(0..2), r.gen_range(0..2), r.gen_range(0..2), r.gen_range(0..2)),
            };
            let x = std_in(g, r, "x", &[2, 7, 8]);
            let w = std_in(g, r, "w", &[3, 2, 3, 2]);
            let b = std_in(g, r, "b", &[3]);
            g.conv2d(x, w, b, spec).unwrap()
        } },
        OpCase { name: "dft", build: |g, r| {
            let window = [4, 8, 16][r.gen_range(0..3)];
            let hop = window / 2;
            let x = std_in(g, r, "x", &[3 * window + 1]);
            g.dft(x, window, hop).unwrap()
        } },
        OpCase { name: "complex_magnitude", build: |g, r| {
            let x = kinked_in(g, r, "x", &[2, 3, 4]);
            g.complex_magnitude(x, 1e-12).unwrap()
        } },
        OpCase { name: "straight_through", build: |g, r| {
            let z = std_in(g, r, "z", &[4, 3]);
            let q = g.constant(uniform(r, &[4, 3], -1.0, 1.0));
            let st = g.straight_through(z, q).unwrap();
            g.square(st).unwrap()
        } },
    ]
}

pub const OP_STEP: f64 = 1e-6;
pub const OP_TOL: f64 = 1e-4;

/// Builds one instance of `case`, contracts its output with random weights
/// and runs a central-difference check on every input component.
pub fn check_op(case: &OpCase, instance: u64) -> GradCheckReport {
    let mut r = rng(0x5eed_0000 + instance * 97 + case.name.len() as u64);
    let mut g = Graph::new();
    let out = (case.build)(&mut g, &mut r);
    let weights = uniform(&mut r, g.shape(out), -1.0, 1.0);
    let w = g.constant(weights);
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod).unwrap();
    let names: Vec<String> = g.input_names().map(str::to_string).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    finite_diff_check(&mut g, loss, &refs, OP_STEP, OP_TOL, Coverage::All).unwrap()
}

// ---------------------------------------------------------------------------
// End-to-end objective

pub const OBJECTIVE_STEP: f64 = 1e-6;
pub const OBJECTIVE_TOL: f64 = 1e-3;
pub const OBJECTIVE_FRAMES: usize = 8;

/// A clip of exactly `frames` frames from the synthetic generator, with guidance.
pub fn synthetic_train_clip(cfg: &TrainConfig, seed: u64, index: u64, frames: usize) -> TrainClip {
    let hop = cfg.codec.hop();
    let wave = synth_clip(seed, index, frames * hop, cfg.codec.sample_rate_hz);
    TrainClip {
        semantic: synth_guidance(&wave, seed, EmbeddingKind::Semantic, cfg.guide_dim, hop),
        contextual: synth_guidance(&wave, seed, EmbeddingKind::Contextual, cfg.guide_dim, hop),
        wave,
    }
}

/// Small enough that every parameter tensor can be probed in a few seconds.
pub fn tiny_config(variant: Variant) -> TrainConfig {
    let mut c = TrainConfig::desk(variant);
    c.codec.strides = vec![2, 2, 2, 2];
    c.codec.base_channels = 1;
    c.codec.embed_dim = 4;
    c.codec.codebook_count = 2;
    c.codec.codebook_size = 8;
    c.codec.recurrent_hidden = 2;
    c.mel = MelScales { exponents: vec![5, 6], mels: 8 };
    c.bank = DiscriminatorBank { stft_windows: vec![32], msd_factors: vec![1], mpd_periods: vec![2], channels: 2 };
    c.guide_dim = 4;
    c.heads = 2;
    c.crop_samples = OBJECTIVE_FRAMES * c.codec.hop();
    c.validate().unwrap();
    c
}

/// At the stock init the decoder output is ~1e-5, so every spectral
/// magnitude sits within a step of its kink at zero. Doubling the generator
/// weights moves the output to ~0.05 where the objective is smooth.
pub const OBJECTIVE_WEIGHT_SCALE: f64 = 2.0;
/// Roundoff in an objective of a few hundred is ~1e-7 per derivative at this
/// step, so derivatives below this are judged on absolute error.
pub const OBJECTIVE_FLOOR: f64 = 1e-4;
pub const OBJECTIVE_PER_INPUT: usize = 4;

/// Five-point differences of the weighted objective for `variant` with
/// respect to every trainable tensor (up to four components each), on an
/// 8-frame crop taken away from the clip's fade-in.
pub fn check_objective(cfg: &TrainConfig, seed: u64) -> GradCheckReport {
    let mut state = TrainState::new(cfg.clone(), seed).unwrap();
    for (_, t) in state.generator.iter_mut() {
        *t = t.map(|x| x * OBJECTIVE_WEIGHT_SCALE);
    }
    let clip = synthetic_train_clip(cfg, seed, 0, 3 * OBJECTIVE_FRAMES);
    let crop: Crop = clip.crop(cfg.codec.hop(), OBJECTIVE_FRAMES, OBJECTIVE_FRAMES).unwrap();
    let masks = FusionMasks::ones(OBJECTIVE_FRAMES, cfg.codec.embed_dim);
    let (mut g, total) = objective_graph(&state, &crop, Some(&masks)).unwrap();
    let names: Vec<String> = g.input_names().map(str::to_string).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let opts = FdOptions {
        step: OBJECTIVE_STEP,
        tol: OBJECTIVE_TOL,
        floor: OBJECTIVE_FLOOR,
        stencil: Stencil::FivePoint,
        coverage: Coverage::Sample { per_input: OBJECTIVE_PER_INPUT, seed },
    };
    finite_diff_check_with(&mut g, total, &refs, &opts).unwrap()
}

// ---------------------------------------------------------------------------
// Quantizer oracles

/// Exhaustive residual quantization: every row's distance is computed, the
/// minimum found, and the first row attaining it chosen.
pub fn exhaustive_rvq(z: &[Vec<f64>], codebooks: &[Vec<Vec<f64>>]) -> (Vec<Vec<u32>>, Vec<Vec<f64>>) {
    let mut residual: Vec<Vec<f64>> = z.to_vec();
    let mut total = vec![vec![0.0; z.first().map_or(0, Vec::len)]; z.len()];
    let mut codes = Vec::new();
    for book in codebooks {
        let mut layer = Vec::new();
        for (t, r) in residual.iter_mut().enumerate() {
            let dists: Vec<f64> =
                book.iter().map(|row| row.iter().zip(r.iter()).map(|(a, b)| (a - b).powi(2)).sum()).collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let idx = dists.iter().position(|&d| d == min).unwrap();
            layer.push(idx as u32);
            for ((x, c), s) in r.iter_mut().zip(&book[idx]).zip(total[t].iter_mut()) {
                *x -= c;
                *s += c;
            }
        }
        codes.push(layer);
    }
    (codes, total)
}

/// Codebook and latent entries on a coarse integer grid so that distance ties
/// are common and every distance is computed exactly.
pub fn grid_instance(r: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let dim = r.gen_range(1..=4);
    let size = r.gen_range(1..=64);
    let layers = r.gen_range(1..=4);
    let frames = r.gen_range(1..=12);
    let cell = |r: &mut ChaCha8Rng| r.gen_range(-3i32..=3) as f64;
    let books = (0..layers).map(|_| (0..size).map(|_| (0..dim).map(|_| cell(r)).collect()).collect()).collect();
    let z = (0..frames).map(|_| (0..dim).map(|_| cell(r)).collect()).collect();
    (z, books)
}

/// Closed form of the EMA recursion for a row that receives the single
/// vector `v` at every one of `steps` updates, starting from count `c0`
/// and sum `s0`.
pub fn ema_closed_form(s0: &[f64], c0: f64, v: &[f64], decay: f64, eps: f64, steps: i32) -> Vec<f64> {
    let gn = decay.powi(steps);
    let count = gn * c0 + (1.0 - gn);
    s0.iter().zip(v).map(|(s, x)| (gn * s + (1.0 - gn) * x) / (count + eps)).collect()
}

pub fn layer_row(layer: &CodebookLayer, r: usize) -> Vec<f64> {
    layer.codebook.row(r).to_vec()
}

// ---------------------------------------------------------------------------
// Window alignment reference

fn ref_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    let denom = aa.sqrt() * bb.sqrt();
    dot / if denom > 1e-8 { denom } else { 1e-8 }
}

pub struct ReferenceAlignment {
    pub sets: Vec<Vec<usize>>,
    pub ell: Vec<usize>,
    pub c_star: Vec<Vec<f64>>,
    pub window: usize,
}

/// Straight transcription of the alignment pseudocode with 1-based row
/// numbers: window start is `(i-1) w` (fixed) or `l + 1` after the first row
/// (dynamic); every window position attaining the maximum similarity is
/// matched and `l` becomes the largest of them. Empty windows match nothing.
pub fn reference_alignment(c: &[Vec<f64>], q: &[Vec<f64>], w: Option<usize>, dynamic: bool) -> Option<ReferenceAlignment> {
    let n = c.len();
    let tp = q.len();
    let w = match w {
        Some(w) => w,
        None => tp / n,
    };
    if w == 0 {
        return None;
    }
    let mut c_star = vec![vec![0.0; c[0].len()]; tp];
    let mut ell = 0usize;
    let mut sets = Vec::new();
    let mut trace = Vec::new();
    for i in 1..=n {
        let s = if dynamic {
            if i > 1 {
                ell + 1
            } else {
                0
            }
        } else {
            (i - 1) * w
        };
        let e = std::cmp::min(s + w, tp);
        let mut alpha = Vec::new();
        let mut t = s;
        while t < e {
            alpha.push((t, ref_cosine(&c[i - 1], &q[t])));
            t += 1;
        }
        if alpha.is_empty() {
            sets.push(Vec::new());
            trace.push(ell);
            continue;
        }
        let mut m = alpha[0].1;
        for &(_, a) in &alpha {
            if a > m {
                m = a;
            }
        }
        let ti: Vec<usize> = alpha.iter().filter(|(_, a)| *a >= m).map(|(t, _)| *t).collect();
        for &t in &ti {
            c_star[t] = c[i - 1].clone();
        }
        ell = *ti.iter().max().unwrap();
        sets.push(ti);
        trace.push(ell);
    }
    Some(ReferenceAlignment { sets, ell: trace, c_star, window: w })
}

/// Rows on a small integer grid so cosine ties (and zero rows) occur.
pub fn grid_rows(r: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..dim).map(|_| r.gen_range(-1i32..=1) as f64).collect()).collect()
}

pub fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows)
}
