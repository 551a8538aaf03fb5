//! Mel filterbanks and plain (non-graph) short-time spectra.

use crate::ndgrad::{dft_frames, DftTables, Tensor};

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters spaced evenly on the mel scale between 0 Hz and
/// Nyquist, peak weight 1. Returned as `[window / 2 + 1, mels]` so that a
/// `[frames, bins]` magnitude matrix times it gives `[frames, mels]`.
pub fn mel_filterbank(sample_rate: u32, window: usize, mels: usize) -> Tensor {
    let bins = window / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..mels + 2).map(|i| mel_to_hz(top * i as f64 / (mels + 1) as f64)).collect();
    let mut fb = Tensor::zeros(&[bins, mels]);
    for k in 0..bins {
        let f = k as f64 * sample_rate as f64 / window as f64;
        for m in 0..mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb.data_mut()[k * mels + m] = w;
        }
    }
    fb
}

/// Hann-windowed DFT magnitudes, `[frames, window / 2 + 1]`, or `None` when
/// the signal is shorter than one window.
pub fn magnitude_frames(x: &[f64], window: usize, hop: usize) -> Option<Tensor> {
    let frames = dft_frames(x.len(), window, hop)?;
    let bins = window / 2 + 1;
    let tab = DftTables::new(window);
    let mut out = Tensor::zeros(&[frames, bins]);
    let mut seg = vec![0.0; window];
    for f in 0..frames {
        for (j, v) in seg.iter_mut().enumerate() {
            *v = tab.window[j] * x[f * hop + j];
        }
        for k in 0..bins {
            let (re, im) = tab.bin(&seg, k);
            out.row_mut(f)[k] = (re * re + im * im).sqrt();
        }
    }
    Some(out)
}

/// Row-by-row product `[r, a] x [a, b]`.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, inner, c) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (k, &av) in arow.iter().enumerate().take(inner) {
            for (o, &bv) in orow.iter_mut().zip(b.row(k)) {
                *o += av * bv;
            }
        }
    }
    out
}
