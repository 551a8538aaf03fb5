//! Token files and PCM16 WAV.
//!
//! Token file (`FCTK`), little-endian: magic, u16 version, u32 layer count
//! `K`, u32 frame count `T'`, u32 codebook size, then `K * T'` u16 codes,
//! layer-major.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::binio::ByteReader;
use crate::error::{Error, Result};
use crate::types::{TokenSequence, Waveform};

pub const TOKEN_MAGIC: &[u8; 4] = b"FCTK";
pub const TOKEN_VERSION: u16 = 1;
pub const TOKEN_HEADER_LEN: usize = 18;

pub fn tokens_to_bytes(tokens: &TokenSequence) -> Result<Vec<u8>> {
    tokens.validate()?;
    if tokens.codebook_size > 1 << 16 {
        return Err(Error::Input(format!("codebook size {} does not fit 16-bit codes", tokens.codebook_size)));
    }
    let mut out = Vec::with_capacity(TOKEN_HEADER_LEN + 2 * tokens.layers() * tokens.frames());
    out.extend_from_slice(TOKEN_MAGIC);
    out.extend_from_slice(&TOKEN_VERSION.to_le_bytes());
    for v in [tokens.layers(), tokens.frames(), tokens.codebook_size] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for layer in &tokens.codes {
        for &c in layer {
            out.extend_from_slice(&(c as u16).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn tokens_from_bytes(bytes: &[u8]) -> Result<TokenSequence> {
    let mut r = ByteReader::new("FCTK", bytes);
    r.magic(TOKEN_MAGIC)?;
    let version = r.u16("version")?;
    if version != TOKEN_VERSION {
        return r.fail(4, format!("unsupported version {version}"));
    }
    let layers = r.u32("layer count")? as usize;
    let frames = r.u32("frame count")? as usize;
    let size = r.u32("codebook size")? as usize;
    if size == 0 || size > 1 << 16 {
        return r.fail(14, format!("codebook size {size} outside 1..=65536"));
    }
    let expected = layers.checked_mul(frames).and_then(|n| n.checked_mul(2));
    if expected != Some(r.remaining()) {
        return r.fail(
            TOKEN_HEADER_LEN,
            format!("payload of {} bytes does not hold {layers} x {frames} codes", r.remaining()),
        );
    }
    let mut codes = Vec::with_capacity(layers);
    for _ in 0..layers {
        let mut layer = Vec::with_capacity(frames);
        for _ in 0..frames {
            let at = r.pos();
            let c = r.u16("code")?;
            if c as usize >= size {
                return r.fail(at, format!("code {c} outside codebook of size {size}"));
            }
            layer.push(c as u32);
        }
        codes.push(layer);
    }
    r.finish()?;
    Ok(TokenSequence { codebook_size: size, codes })
}

pub fn save_tokens(tokens: &TokenSequence, path: &Path) -> Result<()> {
    std::fs::write(path, tokens_to_bytes(tokens)?)?;
    Ok(())
}

pub fn load_tokens(path: &Path) -> Result<TokenSequence> {
    tokens_from_bytes(&std::fs::read(path)?)
}

/// Reads a 16-bit PCM mono file; samples are scaled by `1/32768`.
pub fn read_wav(path: &Path, expected_rate: Option<u32>) -> Result<Waveform> {
    let reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Input(format!(
            "{}: channels = {}, expected 1 (mono)",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Input(format!(
            "{}: sample format {:?} {}-bit, expected 16-bit integer PCM",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    if let Some(rate) = expected_rate {
        if spec.sample_rate != rate {
            return Err(Error::Input(format!(
                "{}: sample rate = {} Hz, expected {rate} Hz",
                path.display(),
                spec.sample_rate
            )));
        }
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Waveform::new(spec.sample_rate, samples))
}

/// Nearest 16-bit code of a sample, saturating outside `[-1, 1)`.
pub fn pcm16(v: f64) -> i16 {
    (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Rounds every sample onto the PCM16 grid that [`write_wav`] stores.
pub fn quantize_pcm16(x: &Waveform) -> Waveform {
    Waveform::new(x.sample_rate, x.samples.iter().map(|&v| pcm16(v) as f64 / 32768.0).collect())
}

pub fn write_wav(x: &Waveform, path: &Path) -> Result<()> {
    let spec = WavSpec { channels: 1, sample_rate: x.sample_rate, bits_per_sample: 16, sample_format: SampleFormat::Int };
    let mut w = WavWriter::create(path, spec)?;
    for &v in &x.samples {
        w.write_sample(pcm16(v))?;
    }
    w.finalize()?;
    Ok(())
}
