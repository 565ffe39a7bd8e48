use std::io;

use thiserror::Error;

use crate::tensor::Coord3;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate coordinate {0:?}")]
    DuplicateCoordinate(Coord3),
    #[error("coordinate {coord:?} is not a multiple of stride {stride}")]
    StrideViolation { coord: Coord3, stride: i32 },
    #[error("geometry is empty")]
    EmptyGeometry,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss node has shape {rows}x{cols}, expected a scalar")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("non-finite quantizer input {0}")]
    NonFiniteInput(f64),
    #[error("invalid mixture scale {0}")]
    InvalidScale(f64),
    #[error("symbol {symbol} outside alphabet of size {alphabet}")]
    SymbolOutOfRange { symbol: usize, alphabet: usize },
    #[error("pmf cannot be quantized: {0}")]
    DegeneratePmf(String),
    #[error("invalid cdf table: {0}")]
    InvalidCdf(String),
    #[error("corrupt stream: {0}")]
    CorruptStream(String),
    #[error("checksum failure in chunk {chunk}")]
    ChecksumFailure { chunk: usize },
    #[error("model digest mismatch: stream {stream}, model {model}")]
    DigestMismatch { stream: String, model: String },
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    #[error("malformed PLY header: {0}")]
    MalformedHeader(String),
    #[error("PLY is missing property `{0}`")]
    MissingProperty(String),
    #[error("unsupported PLY format `{0}`")]
    UnsupportedFormat(String),
    #[error("malformed PLY body: {0}")]
    MalformedBody(String),
    #[error("position {value} outside [0, {limit})")]
    OutOfRange { value: f64, limit: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}
