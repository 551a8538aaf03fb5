//! Encoder, decoder, and residual vector quantizer.

mod config;
mod net;
mod rvq;

pub use config::{CodecConfig, Profile};
pub use net::{decode, decoder_forward, encode, encoder_forward, init_codec_params, waveform_node};
pub use rvq::{
    ema_update, nearest_row, resample_dead_codes, rvq_dequantize, rvq_quantize, CodebookLayer, QuantizerState,
    ResampleReport, RvqOutput,
};

use crate::error::{Error, Result};
use crate::ndgrad::{Graph, NodeId};

/// Graph node whose value is `quantized` and whose gradient flows to `latent`
/// unchanged; the quantized side receives none.
pub fn straight_through(g: &mut Graph, latent: NodeId, quantized: NodeId) -> Result<NodeId> {
    if g.shape(latent) != g.shape(quantized) {
        return Err(Error::Input(format!(
            "straight-through operands differ: {:?} vs {:?}",
            g.shape(latent),
            g.shape(quantized)
        )));
    }
    Ok(g.straight_through(latent, quantized)?)
}
