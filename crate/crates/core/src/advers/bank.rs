//! Waveform discriminators: multi-scale STFT, multi-scale (pooled waveform),
//! and multi-period (waveform folded by a period).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Conv1dSpec, Conv2dSpec, Graph, NodeId, Tensor};
use crate::params::{bind, Bound, ParamStore};
use crate::types::Waveform;

const SLOPE: f64 = 0.2;
/// Feature layers per discriminator (every conv except the scoring one).
pub const FEATURE_LAYERS: usize = 4;
const MSD_MIN_LEN: usize = 15;

/// One member of a [`DiscriminatorBank`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Discriminator {
    /// Complex STFT with the given window (hop = window / 4).
    Stft(usize),
    /// Raw waveform average-pooled by the given factor.
    Scale(usize),
    /// Waveform folded into columns of the given period.
    Period(usize),
}

impl Discriminator {
    pub fn name(&self) -> String {
        match self {
            Discriminator::Stft(w) => format!("stft{w}"),
            Discriminator::Scale(f) => format!("msd{f}"),
            Discriminator::Period(p) => format!("mpd{p}"),
        }
    }

    /// Shortest waveform this discriminator accepts.
    pub fn min_len(&self) -> usize {
        match *self {
            Discriminator::Stft(w) => w,
            Discriminator::Scale(f) => MSD_MIN_LEN * f,
            Discriminator::Period(p) => 2 * p,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorBank {
    pub stft_windows: Vec<usize>,
    pub msd_factors: Vec<usize>,
    pub mpd_periods: Vec<usize>,
    pub channels: usize,
}

impl DiscriminatorBank {
    pub fn paper() -> Self {
        Self {
            stft_windows: vec![512, 1024, 2048],
            msd_factors: vec![1, 2, 4],
            mpd_periods: vec![2, 3, 5, 7, 11],
            channels: 32,
        }
    }

    pub fn desk() -> Self {
        Self { stft_windows: vec![256], msd_factors: vec![1, 2], mpd_periods: vec![2, 3], channels: 4 }
    }

    pub fn members(&self) -> Vec<Discriminator> {
        let stft = self.stft_windows.iter().map(|&w| Discriminator::Stft(w));
        let msd = self.msd_factors.iter().map(|&f| Discriminator::Scale(f));
        let mpd = self.mpd_periods.iter().map(|&p| Discriminator::Period(p));
        stft.chain(msd).chain(mpd).collect()
    }

    pub fn count(&self) -> usize {
        self.stft_windows.len() + self.msd_factors.len() + self.mpd_periods.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.count() == 0 {
            return Err(Error::Config("discriminator bank is empty".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("discriminator channels must be positive".into()));
        }
        if self.stft_windows.iter().any(|&w| w < 16 || w % 4 != 0) {
            return Err(Error::Config(format!("STFT windows must be multiples of 4 and >= 16: {:?}", self.stft_windows)));
        }
        if self.msd_factors.contains(&0) || self.mpd_periods.contains(&0) {
            return Err(Error::Config("pooling factors and periods must be positive".into()));
        }
        Ok(())
    }
}

/// Kernel shapes `(cout, cin, kh, kw)` of one discriminator's conv stack, scoring layer last.
fn kernels(d: &Discriminator, ch: usize) -> Vec<(usize, usize, usize, usize)> {
    match d {
        Discriminator::Stft(_) => vec![(ch, 2, 3, 8), (ch, ch, 3, 8), (ch, ch, 3, 8), (ch, ch, 3, 8), (1, ch, 3, 3)],
        Discriminator::Scale(_) => vec![(ch, 1, 1, 15), (ch, ch, 1, 41), (ch, ch, 1, 41), (ch, ch, 1, 5), (1, ch, 1, 3)],
        Discriminator::Period(_) => vec![(ch, 1, 5, 1), (ch, ch, 5, 1), (ch, ch, 5, 1), (ch, ch, 5, 1), (1, ch, 3, 1)],
    }
}

/// Weights `disc.<name>.conv<j>.{w,b}`; 1-D stacks store `[cout, cin, k]`.
pub fn init_disc_params(bank: &DiscriminatorBank, rng: &mut impl Rng) -> ParamStore {
    let mut s = ParamStore::new();
    for d in bank.members() {
        for (j, (cout, cin, kh, kw)) in kernels(&d, bank.channels).into_iter().enumerate() {
            let name = format!("disc.{}.conv{j}", d.name());
            let bound = 1.0 / ((cin * kh * kw) as f64).sqrt();
            let shape: Vec<usize> =
                if matches!(d, Discriminator::Scale(_)) { vec![cout, cin, kw] } else { vec![cout, cin, kh, kw] };
            s.init_uniform(format!("{name}.w"), &shape, bound, rng);
            s.init_zeros(format!("{name}.b"), &[cout]);
        }
    }
    s
}

/// Graph handles for one discriminator's output.
#[derive(Clone, Debug)]
pub struct DiscNodes {
    pub score: NodeId,
    pub features: Vec<NodeId>,
}

/// Evaluated discriminator output.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscOutput {
    pub name: String,
    pub score: f64,
    pub features: Vec<Tensor>,
}

fn stft_stack(g: &mut Graph, x: NodeId, window: usize, p: &Bound, pre: &str) -> Result<DiscNodes> {
    let spec = g.dft(x, window, window / 4)?;
    let mut h = spec;
    let mut features = Vec::with_capacity(FEATURE_LAYERS);
    for j in 0..FEATURE_LAYERS {
        let (dil, stride_f) = if j == 0 { (1, 1) } else { (1 << (j - 1), 2) };
        let pad_f = if j == 0 { (3, 4) } else { (3, 3) };
        let conv = Conv2dSpec { stride: (1, stride_f), dilation: (dil, 1), pad: (dil, dil, pad_f.0, pad_f.1) };
        h = g.conv2d(h, p[&format!("{pre}.conv{j}.w")], p[&format!("{pre}.conv{j}.b")], conv)?;
        h = g.leaky_relu(h, SLOPE)?;
        features.push(h);
    }
    let last = Conv2dSpec { stride: (1, 1), dilation: (1, 1), pad: (1, 1, 1, 1) };
    let out = g.conv2d(h, p[&format!("{pre}.conv4.w")], p[&format!("{pre}.conv4.b")], last)?;
    Ok(DiscNodes { score: g.mean(out)?, features })
}

fn scale_stack(g: &mut Graph, x: NodeId, factor: usize, p: &Bound, pre: &str) -> Result<DiscNodes> {
    let mut h = if factor > 1 { g.avg_pool_last(x, factor)? } else { x };
    let specs = [(1, 7), (4, 20), (4, 20), (1, 2), (1, 1)];
    let mut features = Vec::with_capacity(FEATURE_LAYERS);
    for (j, &(stride, pad)) in specs.iter().enumerate() {
        let conv = Conv1dSpec { stride, dilation: 1, pad_left: pad, pad_right: pad };
        h = g.conv1d(h, p[&format!("{pre}.conv{j}.w")], p[&format!("{pre}.conv{j}.b")], conv)?;
        if j < FEATURE_LAYERS {
            h = g.leaky_relu(h, SLOPE)?;
            features.push(h);
        }
    }
    Ok(DiscNodes { score: g.mean(h)?, features })
}

fn period_stack(g: &mut Graph, x: NodeId, period: usize, p: &Bound, pre: &str) -> Result<DiscNodes> {
    let n = g.shape(x)[1];
    let padded = n.div_ceil(period) * period;
    let x = if padded > n { g.pad_last(x, 0, padded - n)? } else { x };
    let mut h = g.reshape(x, &[1, padded / period, period])?;
    let mut features = Vec::with_capacity(FEATURE_LAYERS);
    for j in 0..=FEATURE_LAYERS {
        let (stride, pad) = match j {
            0..=2 => (3, 2),
            3 => (1, 2),
            _ => (1, 1),
        };
        let conv = Conv2dSpec { stride: (stride, 1), dilation: (1, 1), pad: (pad, pad, 0, 0) };
        h = g.conv2d(h, p[&format!("{pre}.conv{j}.w")], p[&format!("{pre}.conv{j}.b")], conv)?;
        if j < FEATURE_LAYERS {
            h = g.leaky_relu(h, SLOPE)?;
            features.push(h);
        }
    }
    Ok(DiscNodes { score: g.mean(h)?, features })
}

/// Runs every discriminator of the bank on `x` (`[1, N]`), in bank order.
pub fn discriminate_nodes(g: &mut Graph, x: NodeId, bank: &DiscriminatorBank, p: &Bound) -> Result<Vec<DiscNodes>> {
    let n = g.shape(x).iter().product::<usize>();
    let mut outs = Vec::with_capacity(bank.count());
    for d in bank.members() {
        let name = d.name();
        if n < d.min_len() {
            return Err(Error::Input(format!(
                "discriminator {name} needs at least {} samples, got {n}",
                d.min_len()
            )));
        }
        let pre = format!("disc.{name}");
        let nodes = match d {
            Discriminator::Stft(w) => stft_stack(g, x, w, p, &pre)?,
            Discriminator::Scale(f) => scale_stack(g, x, f, p, &pre)?,
            Discriminator::Period(per) => period_stack(g, x, per, p, &pre)?,
        };
        outs.push(nodes);
    }
    Ok(outs)
}

/// Inference-only evaluation of the whole bank.
pub fn discriminate(x: &Waveform, bank: &DiscriminatorBank, params: &ParamStore) -> Result<Vec<DiscOutput>> {
    let mut g = Graph::new();
    let p = bind(&mut g, &params.with_prefix("disc."), false)?;
    let xn = g.try_constant(Tensor::new(&[1, x.len()], x.samples.clone()))?;
    let nodes = discriminate_nodes(&mut g, xn, bank, &p)?;
    Ok(bank
        .members()
        .iter()
        .zip(nodes)
        .map(|(d, n)| DiscOutput {
            name: d.name(),
            score: g.value(n.score).item(),
            features: n.features.iter().map(|&f| g.value(f).clone()).collect(),
        })
        .collect())
}
