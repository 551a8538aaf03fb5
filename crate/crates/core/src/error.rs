use thiserror::Error;

use crate::ndgrad::GraphError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("{file}: malformed data at byte {offset}: {detail}")]
    Format { file: &'static str, offset: u64, detail: String },
    #[error("alignment: {0}")]
    Alignment(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
