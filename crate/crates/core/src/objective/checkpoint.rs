//! Binary checkpoint of a [`TrainState`].
//!
//! Layout, all little-endian: magic `SCKP`, u16 version, u64 seed, u64 step,
//! u64 skipped, u32 length + UTF-8 TOML of the training config, then six
//! parameter stores (generator, discriminator, generator moments m/v,
//! discriminator moments m/v), then the quantizer. A store is u32 count
//! followed by entries of u16 name length, name, tensor. A tensor is u8 rank,
//! u32 per dimension, then f64 values. The quantizer is f64 decay, f64
//! epsilon, u32 layer count, then per layer: codebook tensor, u32 + f64 EMA
//! counts, EMA sum tensor, u32 + u64 usage counters.

use std::path::Path;

use super::adam::AdamMoments;
use super::train::{TrainConfig, TrainState};
use crate::binio::ByteReader;
use crate::codec::{CodebookLayer, QuantizerState};
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCKP";
pub const CHECKPOINT_VERSION: u16 = 1;
const FILE: &str = "checkpoint";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("length fits in u32").to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.push(u8::try_from(t.rank()).expect("rank fits in u8"));
    for &d in t.shape() {
        put_u32(out, d);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_store(out: &mut Vec<u8>, s: &ParamStore) {
    put_u32(out, s.len());
    for (name, t) in s.iter() {
        let len = u16::try_from(name.len()).expect("parameter name fits in u16");
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        put_tensor(out, t);
    }
}

fn get_tensor(r: &mut ByteReader) -> Result<Tensor> {
    let at = r.pos();
    let rank = r.u8("tensor rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("tensor dimension")? as usize);
    }
    let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let Some(len) = len.filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining())) else {
        return r.fail(at, format!("tensor of shape {shape:?} exceeds the remaining bytes"));
    };
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(r.f64("tensor value")?);
    }
    Ok(Tensor::new(&shape, data))
}

fn get_store(r: &mut ByteReader) -> Result<ParamStore> {
    let count = r.u32("parameter count")?;
    let mut s = ParamStore::new();
    for _ in 0..count {
        let at = r.pos();
        let len = r.u16("name length")? as usize;
        let name = match std::str::from_utf8(r.take(len, "parameter name")?) {
            Ok(n) => n.to_string(),
            Err(_) => return r.fail(at, "parameter name is not UTF-8"),
        };
        if s.contains(&name) {
            return r.fail(at, format!("duplicate parameter `{name}`"));
        }
        s.insert(name, get_tensor(r)?);
    }
    Ok(s)
}

pub fn checkpoint_to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let config =
        toml::to_string(&state.config).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [state.seed, state.step, state.skipped] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_u32(&mut out, config.len());
    out.extend_from_slice(config.as_bytes());
    for s in [
        &state.generator,
        &state.discriminator,
        &state.gen_moments.m,
        &state.gen_moments.v,
        &state.disc_moments.m,
        &state.disc_moments.v,
    ] {
        put_store(&mut out, s);
    }
    let q = &state.quantizer;
    out.extend_from_slice(&q.ema_decay.to_le_bytes());
    out.extend_from_slice(&q.laplace_eps.to_le_bytes());
    put_u32(&mut out, q.layers.len());
    for layer in &q.layers {
        put_tensor(&mut out, &layer.codebook);
        put_u32(&mut out, layer.ema_count.len());
        for c in &layer.ema_count {
            out.extend_from_slice(&c.to_le_bytes());
        }
        put_tensor(&mut out, &layer.ema_sum);
        put_u32(&mut out, layer.usage.len());
        for u in &layer.usage {
            out.extend_from_slice(&u.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let mut r = ByteReader::new(FILE, bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let at = r.pos();
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return r.fail(at, format!("unsupported version {version}"));
    }
    let seed = r.u64("seed")?;
    let step = r.u64("step")?;
    let skipped = r.u64("skip counter")?;
    let at = r.pos();
    let len = r.u32("config length")? as usize;
    let text = match std::str::from_utf8(r.take(len, "config")?) {
        Ok(t) => t,
        Err(_) => return r.fail(at + 4, "config is not UTF-8"),
    };
    let config: TrainConfig = match toml::from_str(text) {
        Ok(c) => c,
        Err(e) => return r.fail(at + 4, format!("config does not parse: {e}")),
    };
    let generator = get_store(&mut r)?;
    let discriminator = get_store(&mut r)?;
    let gen_moments = AdamMoments { m: get_store(&mut r)?, v: get_store(&mut r)? };
    let disc_moments = AdamMoments { m: get_store(&mut r)?, v: get_store(&mut r)? };
    let ema_decay = r.f64("EMA decay")?;
    let laplace_eps = r.f64("EMA epsilon")?;
    let count = r.u32("quantizer layers")?;
    let mut layers = Vec::new();
    for _ in 0..count {
        let at = r.pos();
        let codebook = get_tensor(&mut r)?;
        let n = r.u32("EMA count length")? as usize;
        let ema_count = (0..n).map(|_| r.f64("EMA count")).collect::<Result<Vec<_>>>()?;
        let ema_sum = get_tensor(&mut r)?;
        let n = r.u32("usage length")? as usize;
        let usage = (0..n).map(|_| r.u64("usage counter")).collect::<Result<Vec<_>>>()?;
        let size = codebook.rows();
        if codebook.rank() != 2 || ema_sum.shape() != codebook.shape() || ema_count.len() != size || usage.len() != size {
            return r.fail(at, "inconsistent codebook layer");
        }
        layers.push(CodebookLayer { codebook, ema_count, ema_sum, usage });
    }
    r.finish()?;
    let state = TrainState {
        config,
        seed,
        step,
        skipped,
        generator,
        discriminator,
        gen_moments,
        disc_moments,
        quantizer: QuantizerState { layers, ema_decay, laplace_eps },
    };
    state.config.validate()?;
    Ok(state)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
