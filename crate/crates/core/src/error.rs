use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index {index} out of range for {len} entries")]
    Index { index: usize, len: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("non-finite gradient in parameter `{name}` (id {id})")]
    NonFiniteGradient { name: String, id: u64 },

    #[error("non-finite loss at task {task}, step {step}: {detail}")]
    NonFiniteLoss {
        task: usize,
        step: usize,
        detail: String,
    },

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("frozen component touched: {0}")]
    Frozen(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("invalid task order: {0}")]
    TaskOrder(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint format version {found} is not supported (expected {expected}); re-run the experiment to migrate")]
    Version { found: u32, expected: u32 },

    #[error("stream verification failed: {0}")]
    Stream(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
