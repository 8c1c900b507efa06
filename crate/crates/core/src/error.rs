use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid STFT configuration: {0}")]
    InvalidStftConfig(String),
    #[error("waveform has {len} samples, need at least {needed} for one frame")]
    WaveformTooShort { len: usize, needed: usize },
    #[error("invalid sample rate {0}")]
    InvalidSampleRate(u32),
    #[error("sample rate {found} Hz does not match expected {expected} Hz")]
    SampleRateMismatch { expected: u32, found: u32 },
    #[error("spectrogram has no phase (magnitude kind) and cannot be inverted")]
    MissingPhase,
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("need at least {needed} frames, found {found}")]
    TooFewFrames { needed: usize, found: usize },
    #[error("mask value {0} outside [0, 1]")]
    MaskOutOfRange(f64),
    #[error("reference transcript is empty")]
    EmptyReference,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("character {0:?} is not in the recognizer alphabet")]
    OutOfAlphabet(char),
    #[error("recognizer failure: {0}")]
    Recognizer(String),
    #[error("recognizer timed out after {0} s")]
    RecognizerTimeout(u64),
    #[error("malformed recognizer output: {0}")]
    MalformedOutput(String),
    #[error("unknown utterance id {0:?}")]
    UnknownUtterance(String),
    #[error("duplicate utterance id {0:?}")]
    DuplicateUtterance(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("speech signal is silent (no voice-active frames)")]
    SilentSpeech,
    #[error("noise signal is silent")]
    SilentNoise,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint config hash {found} does not match expected {expected}")]
    ConfigHashMismatch { expected: String, found: String },
    #[error("non-finite loss at epoch {epoch}, step {step}: {loss_name} = {value}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        loss_name: &'static str,
        value: f64,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: &[usize], found: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }
}
