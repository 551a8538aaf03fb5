pub mod advers;
mod binio;
pub mod codec;
pub mod error;
pub mod guide;
pub mod ndgrad;
pub mod objective;
pub mod params;
pub mod shell;
pub mod spectral;
pub mod types;

pub use error::{Error, Result};
pub use types::{LatentSequence, TokenSequence, Waveform};
