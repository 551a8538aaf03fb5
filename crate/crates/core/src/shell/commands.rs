//! Command implementations behind the `sctok` binary.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::corpus::{load_corpus, make_synthetic_corpus, CorpusSpec};
use super::formats::{load_tokens, read_wav, save_tokens, write_wav};
use super::metrics::{evaluate, EvalReport};
use crate::codec::{decode, encoder_forward, rvq_dequantize, rvq_quantize};
use crate::error::{Error, Result};
use crate::guide::{
    align_windows, broadcast, fuse_latent, pool_globals, AlignedTargets, EmbeddingSequence, FusionMasks, WindowMode,
};
use crate::ndgrad::{Graph, Tensor};
use crate::objective::{
    load_checkpoint, save_checkpoint, train_step, LossBreakdown, TrainState, Variant,
};
use crate::params::bind;
use crate::types::{LatentSequence, TokenSequence, Waveform};

/// Outcome of [`cmd_train`].
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub state: TrainState,
    pub rows: Vec<LossBreakdown>,
}

/// Lines describing the run, each starting with `#`.
fn config_echo(state: &TrainState, steps: u64) -> Result<String> {
    let toml = toml::to_string(&state.config).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = String::new();
    writeln!(out, "# seed = {}", state.seed).expect("string write");
    writeln!(out, "# start_step = {}", state.step).expect("string write");
    writeln!(out, "# steps = {steps}").expect("string write");
    for line in toml.lines().filter(|l| !l.trim().is_empty()) {
        writeln!(out, "# {line}").expect("string write");
    }
    writeln!(out, "# {}", LossBreakdown::COLUMNS.join(" ")).expect("string write");
    Ok(out)
}

/// Trains for `run.steps` steps, writing the log as it goes and the
/// checkpoint at the end. Same config and seed give a byte-identical log.
pub fn cmd_train(run: &RunConfig) -> Result<TrainSummary> {
    let mut state = match &run.resume {
        Some(path) => {
            let st = load_checkpoint(path)?;
            if st.config.variant != run.variant {
                return Err(Error::Config(format!(
                    "checkpoint was trained as {}, config asks for {}",
                    st.config.variant, run.variant
                )));
            }
            st
        }
        None => TrainState::new(run.train_config()?, run.seed)?,
    };
    let clips = load_corpus(&run.data, &state.config)?;
    if clips.is_empty() {
        return Err(Error::Input(format!("corpus at {} has no clips", run.data.display())));
    }
    let mut log = BufWriter::new(File::create(&run.log)?);
    log.write_all(config_echo(&state, run.steps)?.as_bytes())?;
    let mut rows = Vec::with_capacity(run.steps as usize);
    for _ in 0..run.steps {
        let b = train_step(&mut state, &clips)?;
        if !b.total.is_finite() {
            log::warn!("step {}: non-finite objective {}", state.step, b.total);
        }
        writeln!(log, "{}", b.log_row(state.step, state.skipped))?;
        rows.push(b);
    }
    log.flush()?;
    save_checkpoint(&state, &run.checkpoint)?;
    Ok(TrainSummary { state, rows })
}

/// Optional guidance for encoding with a fusion-trained model.
pub struct EncodeGuidance<'a> {
    pub semantic: &'a EmbeddingSequence,
    pub contextual: &'a EmbeddingSequence,
}

/// Frozen-model tokenization. Fusion-trained models fuse the guidance when
/// it is given and otherwise encode with both modalities masked out.
pub fn encode_tokens(state: &TrainState, x: &Waveform, guidance: Option<EncodeGuidance>) -> Result<TokenSequence> {
    let cfg = &state.config;
    if x.sample_rate != cfg.codec.sample_rate_hz {
        return Err(Error::Input(format!(
            "sample rate = {} Hz, model expects {} Hz",
            x.sample_rate, cfg.codec.sample_rate_hz
        )));
    }
    let mut g = Graph::new();
    let p = bind(&mut g, &state.generator, false)?;
    let xn = crate::codec::waveform_node(&mut g, x, &cfg.codec)?;
    let mut z = encoder_forward(&mut g, xn, &cfg.codec, &p)?;
    if let (Variant::Fusion, Some(gd)) = (cfg.variant, guidance) {
        let frames = g.shape(z)[0];
        let gv = pool_globals(gd.semantic, gd.contextual)?;
        let s = g.try_constant(broadcast(&gv.semantic, frames))?;
        let c = g.try_constant(broadcast(&gv.contextual, frames))?;
        let masks = FusionMasks::ones(frames, cfg.codec.embed_dim);
        z = fuse_latent(&mut g, z, s, c, &cfg.fusion(), &p, &masks)?;
    }
    let latent = LatentSequence::new(g.value(z).clone())?;
    Ok(rvq_quantize(&latent, &state.quantizer)?.tokens)
}

/// Frozen-model reconstruction of `T' * hop` samples.
pub fn decode_tokens(state: &TrainState, tokens: &TokenSequence) -> Result<Waveform> {
    tokens.validate()?;
    let q = &state.quantizer;
    if tokens.codebook_size != q.codebook_size() {
        return Err(Error::Input(format!(
            "token codebook_size {} does not match the checkpoint's {}",
            tokens.codebook_size,
            q.codebook_size()
        )));
    }
    if tokens.layers() != q.layers.len() {
        return Err(Error::Input(format!(
            "token file has {} layers, checkpoint has {}",
            tokens.layers(),
            q.layers.len()
        )));
    }
    if tokens.frames() == 0 {
        return Err(Error::Input("token file has no frames (T' = 0)".into()));
    }
    let latent = rvq_dequantize(tokens, q)?;
    decode(&latent, &state.config.codec, &state.generator)
}

pub fn cmd_encode(
    wav: &Path,
    checkpoint: &Path,
    out: &Path,
    guidance: Option<(&Path, &Path)>,
) -> Result<TokenSequence> {
    let state = load_checkpoint(checkpoint)?;
    let x = read_wav(wav, Some(state.config.codec.sample_rate_hz))?;
    let loaded = guidance.map(|(s, c)| Ok::<_, Error>((EmbeddingSequence::load(s)?, EmbeddingSequence::load(c)?))).transpose()?;
    let gd = loaded.as_ref().map(|(s, c)| EncodeGuidance { semantic: s, contextual: c });
    let tokens = encode_tokens(&state, &x, gd)?;
    save_tokens(&tokens, out)?;
    Ok(tokens)
}

pub fn cmd_decode(tokens: &Path, checkpoint: &Path, out: &Path) -> Result<Waveform> {
    let state = load_checkpoint(checkpoint)?;
    let t = load_tokens(tokens)?;
    let x = decode_tokens(&state, &t)?;
    write_wav(&x, out)?;
    Ok(x)
}

/// SHA-256 over the little-endian `f64` values of `m`, row-major.
pub fn matrix_checksum(m: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in m.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Text report of an alignment: header comments, one line per contextual
/// row with its matched token positions (`-` when skipped) and the
/// last-matched index, then coverage and the target checksum.
pub fn alignment_report(t: &AlignedTargets, mode: WindowMode) -> String {
    let mut out = String::new();
    writeln!(out, "# mode {mode}").expect("string write");
    writeln!(out, "# window {}", t.window).expect("string write");
    writeln!(out, "# rows {}", t.matches.len()).expect("string write");
    writeln!(out, "# tokens {}", t.coverage.len()).expect("string write");
    writeln!(out, "i last matches").expect("string write");
    for (i, (m, last)) in t.matches.iter().zip(&t.last_match).enumerate() {
        let set = match m {
            Some(s) => s.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
            None => "-".to_string(),
        };
        writeln!(out, "{i} {last} {set}").expect("string write");
    }
    writeln!(out, "coverage {:.6}", t.coverage_fraction()).expect("string write");
    writeln!(out, "c_star_sha256 {}", matrix_checksum(&t.c_star)).expect("string write");
    out
}

/// Aligns the contextual rows in `embeddings` to the projected token rows
/// in `token_embeddings` (both embedding files).
pub fn cmd_align(
    embeddings: &Path,
    token_embeddings: &Path,
    mode: WindowMode,
    window: Option<usize>,
) -> Result<(AlignedTargets, String)> {
    let c = EmbeddingSequence::load(embeddings)?;
    let q = EmbeddingSequence::load(token_embeddings)?;
    let t = align_windows(&c.matrix, &q.matrix, window, mode)?;
    let report = alignment_report(&t, mode);
    Ok((t, report))
}

pub fn cmd_eval(reference: &Path, test: &Path, tokens: Option<&Path>) -> Result<EvalReport> {
    let a = read_wav(reference, None)?;
    let b = read_wav(test, None)?;
    let t = tokens.map(load_tokens).transpose()?;
    evaluate(&a, &b, t.as_ref())
}

pub fn cmd_corpus(dir: &Path, spec: &CorpusSpec) -> Result<Vec<String>> {
    make_synthetic_corpus(dir, spec)
}
