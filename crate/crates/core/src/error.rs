use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pitch {0}: must be in 0..=127")]
    PitchOutOfRange(i32),
    #[error("notes overlap: event at frame {first} (len {first_len}) overlaps event at frame {second}")]
    Overlap {
        first: usize,
        first_len: usize,
        second: usize,
    },
    #[error("event at frame {onset} with duration {duration} exceeds {total} frames")]
    EventOutOfBounds {
        onset: usize,
        duration: usize,
        total: usize,
    },
    #[error("invalid piece: {0}")]
    InvalidPiece(String),
    #[error("transposition overflows pitch range at frame {frame}")]
    TransposeOverflow { frame: usize },
    #[error("unknown chord quality `{0}`")]
    UnknownQuality(String),
    #[error("invalid token `{0}`")]
    InvalidToken(String),
    #[error("line {line}: field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },
    #[error("invalid interleaved sequence: {0}")]
    Interleave(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence of {len} positions exceeds model limit of {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { id: usize, vocab: usize },
    #[error("length mismatch: melody has {melody} frames, chords have {chords}")]
    LengthMismatch { melody: usize, chords: usize },
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },
    #[error("vocabulary mismatch: policy has {policy} chord tokens, teacher has {teacher}")]
    VocabMismatch { policy: usize, teacher: usize },
    #[error("untrained reward model: {0}")]
    Untrained(String),
    #[error("histogram binning mismatch")]
    BinningMismatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
