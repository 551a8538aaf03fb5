//! Objective comparison metrics for decoded audio and token streams.

use std::fmt;

use crate::error::{Error, Result};
use crate::objective::{loss_freq, loss_time, MelScales};
use crate::types::{TokenSequence, Waveform};

/// Reported SNR saturates at `+-SNR_CAP_DB`.
pub const SNR_CAP_DB: f64 = 99.0;

/// `10 log10(sum ref^2 / sum (ref - test)^2)`, clamped to the cap. An exact
/// match reports `+SNR_CAP_DB`; a silent reference with nonzero error
/// reports `-SNR_CAP_DB`. A silent `test` gives exactly 0 dB.
pub fn snr_db(reference: &[f64], test: &[f64]) -> Result<f64> {
    if reference.len() != test.len() {
        return Err(Error::Input(format!("lengths differ: {} vs {}", reference.len(), test.len())));
    }
    let signal: f64 = reference.iter().map(|v| v * v).sum();
    let noise: f64 = reference.iter().zip(test).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(if noise == 0.0 {
        SNR_CAP_DB
    } else if signal == 0.0 {
        -SNR_CAP_DB
    } else {
        (10.0 * (signal / noise).log10()).clamp(-SNR_CAP_DB, SNR_CAP_DB)
    })
}

/// Shannon entropy in bits of the code histogram pooled over all layers.
pub fn usage_entropy_bits(tokens: &TokenSequence) -> Result<f64> {
    tokens.validate()?;
    let mut counts = vec![0u64; tokens.codebook_size];
    for layer in &tokens.codes {
        for &c in layer {
            counts[c as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Input("no tokens to measure".into()));
    }
    let n = total as f64;
    Ok(counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 / n).map(|p| -p * p.log2()).sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Samples compared after trimming to the shorter file.
    pub samples: usize,
    pub l_time: f64,
    pub l_freq: f64,
    pub snr_db: f64,
    pub usage_entropy_bits: Option<f64>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "metric value")?;
        writeln!(f, "samples {}", self.samples)?;
        writeln!(f, "l_time {:.10e}", self.l_time)?;
        writeln!(f, "l_freq {:.10e}", self.l_freq)?;
        writeln!(f, "snr_db {:.6}", self.snr_db)?;
        match self.usage_entropy_bits {
            Some(h) => writeln!(f, "usage_entropy_bits {h:.6}"),
            None => writeln!(f, "usage_entropy_bits NA"),
        }
    }
}

/// Compares `test` against `reference` after trimming both to the shorter
/// length; reconstruction terms use the desk mel scales.
pub fn evaluate(reference: &Waveform, test: &Waveform, tokens: Option<&TokenSequence>) -> Result<EvalReport> {
    if reference.sample_rate != test.sample_rate {
        return Err(Error::Input(format!(
            "sample rates differ: {} vs {}",
            reference.sample_rate, test.sample_rate
        )));
    }
    let n = reference.len().min(test.len());
    if n == 0 {
        return Err(Error::Input("nothing to compare after trimming".into()));
    }
    let a = Waveform::new(reference.sample_rate, reference.samples[..n].to_vec());
    let b = Waveform::new(test.sample_rate, test.samples[..n].to_vec());
    Ok(EvalReport {
        samples: n,
        l_time: loss_time(&a, &b)?,
        l_freq: loss_freq(&a, &b, &MelScales::desk())?,
        snr_db: snr_db(&a.samples, &b.samples)?,
        usage_entropy_bits: tokens.map(usage_entropy_bits).transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snr_conventions() {
        let r = [0.5, -0.25, 0.125];
        assert_eq!(snr_db(&r, &r).unwrap(), SNR_CAP_DB);
        assert_eq!(snr_db(&r, &[0.0; 3]).unwrap(), 0.0);
        assert_eq!(snr_db(&[0.0; 3], &r).unwrap(), -SNR_CAP_DB);
        assert!(snr_db(&r, &[0.0]).is_err());
    }

    #[test]
    fn entropy_of_small_histograms() {
        let one = TokenSequence { codebook_size: 4, codes: vec![vec![2, 2, 2]] };
        assert_eq!(usage_entropy_bits(&one).unwrap(), 0.0);
        let two = TokenSequence { codebook_size: 4, codes: vec![vec![0, 1], vec![1, 0]] };
        assert_eq!(usage_entropy_bits(&two).unwrap(), 1.0);
    }
}
