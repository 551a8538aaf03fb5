//! Files, commands and metrics around the codec.

mod commands;
mod config;
mod corpus;
mod formats;
mod metrics;

pub use commands::{
    alignment_report, cmd_align, cmd_corpus, cmd_decode, cmd_encode, cmd_eval, cmd_train, decode_tokens,
    encode_tokens, matrix_checksum, EncodeGuidance, TrainSummary,
};
pub use config::RunConfig;
pub use corpus::{load_corpus, make_synthetic_corpus, synth_clip, CorpusSpec, MANIFEST};
pub use formats::{
    load_tokens, pcm16, quantize_pcm16, read_wav, save_tokens, tokens_from_bytes, tokens_to_bytes, write_wav,
    TOKEN_HEADER_LEN, TOKEN_MAGIC, TOKEN_VERSION,
};
pub use metrics::{evaluate, snr_db, usage_entropy_bits, EvalReport, SNR_CAP_DB};
