use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("malformed WAV header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("unsupported WAV encoding in {path}: {reason}")]
    UnsupportedEncoding { path: PathBuf, reason: String },

    #[error("cannot write {path}: {source}")]
    Unwritable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at {path}:{line}: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("malformed binary file {path}: {reason}")]
    MalformedBinary { path: PathBuf, reason: String },

    #[error("invalid audio buffer: {0}")]
    InvalidBuffer(String),

    #[error("unsupported sample rate {actual} Hz (expected {expected} Hz)")]
    SampleRate { expected: u32, actual: u32 },

    #[error("channel {requested} out of range ({available} channels)")]
    ChannelOutOfRange { requested: usize, available: usize },

    #[error("reference channel count mismatch: state has {expected}, got {actual}")]
    ReferenceCount { expected: usize, actual: usize },

    #[error("vector is not unit-norm (norm = {0})")]
    NotUnitNorm(f64),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid phrase set: {0}")]
    PhraseSet(String),

    #[error("unknown word id {0}")]
    UnknownWord(usize),

    #[error("alignment not monotone at entry {0}")]
    NonMonotoneAlignment(usize),

    #[error("missing enrollment profile for speaker {0}")]
    MissingProfile(String),
}
