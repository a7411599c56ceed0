use std::io;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    // data model
    #[error("length mismatch: {tokens} tokens but {labels} labels")]
    LengthMismatch { tokens: usize, labels: usize },
    #[error("empty sentence")]
    EmptySentence,
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("duplicate entity type {0:?}")]
    DuplicateType(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid episode: {0}")]
    InvalidEpisode(String),

    // corpus and embeddings
    #[error("malformed line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("corpus contains no sentences")]
    EmptyCorpus,
    #[error("inconsistent corpus: {0}")]
    InconsistentCorpus(String),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("truncated stream: {0}")]
    TruncatedStream(String),
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("duplicate embedding record for sentence {sentence_id} token {token_index}")]
    DuplicateRecord { sentence_id: u32, token_index: u32 },
    #[error("missing embedding for sentence {sentence_id} token {token_index}")]
    MissingEmbedding { sentence_id: u32, token_index: u32 },
    #[error("hash embedding of {0:?} is the zero vector")]
    ZeroVector(String),

    // sampling
    #[error("insufficient data for {what}: have {have}, need {need}")]
    InsufficientData { what: String, have: usize, need: usize },
    #[error("exhausted candidate sentences while filling the {0} set")]
    ExhaustedCandidates(&'static str),

    // network and losses
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("forward trace does not match: {0}")]
    TraceMismatch(String),
    #[error("class in slot {0} has no labeled support token")]
    EmptyClass(usize),
    #[error("slot {0} has no positive token")]
    NoPositive(usize),
    #[error("slot {0} has no negative token")]
    NoNegative(usize),
    #[error("episode has {episode} ways but the network carries {params} margins")]
    SlotCountMismatch { episode: usize, params: usize },
    #[error("parameter update produced non-finite values")]
    NonFiniteUpdate,
    #[error("label sequences differ in shape")]
    ShapeMismatch,

    #[error("checkpoint i/o: {0}")]
    CheckpointIo(#[source] io::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("episode line: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
