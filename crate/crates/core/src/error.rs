use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("matrix is singular or ill-conditioned (condition estimate {0:.3e})")]
    IllConditioned(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid computation record: {0}")]
    Record(String),

    #[error("task `{0}` has an all-zero Fisher estimate")]
    ZeroTaskFisher(String),

    #[error("block {0} has an all-zero sensitivity row")]
    ZeroBlockRow(usize),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("calibration of block {block} failed at step {step}: {detail}")]
    Calibration {
        block: usize,
        step: usize,
        detail: String,
    },

    #[error("memory budget exceeded: need {needed} bytes, budget {budget} bytes")]
    MemoryBudget { needed: usize, budget: usize },

    #[error("value {value} outside the {bits}-bit code range")]
    CodeRange { value: i32, bits: u32 },

    #[error("integer accumulator overflow guard: {0}")]
    AccumulatorGuard(String),

    #[error("stale folded weight: transform version {transform}, cache version {cache}")]
    StaleFold { transform: u64, cache: u64 },

    #[error("file format error: {0}")]
    Format(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
