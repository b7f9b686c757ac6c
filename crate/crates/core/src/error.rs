use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input sequence")]
    EmptyInput,
    #[error("index task input out of range: {0}")]
    IndexInputOutOfRange(i64),
    #[error("non-digit input: {0}")]
    NonDigit(i64),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("block factorial over budget: {0}! exceeds cap {1}")]
    FactorialOverBudget(usize, u64),
    #[error("requested {requested} permutations but only {available} distinct ones exist")]
    SetExhausted { requested: usize, available: u128 },
    #[error("out-of-vocabulary value: {0}")]
    OutOfVocab(i64),
    #[error("numeric overflow: non-finite value in {0}")]
    NumericOverflow(&'static str),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("cannot split length {len} into {k} blocks")]
    BadBlockCount { len: usize, k: usize },
    #[error("depth too large for budget: keep count reached zero at round {round}")]
    DepthTooLarge { round: usize },
    #[error("empty permutation set")]
    EmptyPermSet,
    #[error("invalid attention capture: {0}")]
    InvalidCapture(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
