use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate mask: row {row} has no visible entry")]
    DegenerateMask { row: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    Rank { shape: Vec<usize> },

    #[error("function is not deterministic: repeated evaluation gave {first} then {second}")]
    Determinism { first: f64, second: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what} = {value} is outside [{lo}, {hi}]")]
    Range { what: &'static str, value: f64, lo: f64, hi: f64 },

    #[error("instruction id {id} is outside the vocabulary of {vocab}")]
    Vocabulary { id: usize, vocab: usize },

    #[error("starvation risk: prefix length {prefix} is shorter than inference latency {latency}")]
    StarvationRisk { prefix: usize, latency: usize },

    #[error("schedule layout error: {0}")]
    Layout(String),

    #[error("sensor stream {0} is empty")]
    MissingModality(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },

    #[error("training fault at step {step}: {msg}")]
    TrainingFault { step: usize, msg: String },

    #[error("freeze violation at step {step}: parameter `{param}` received a gradient")]
    FreezeViolation { step: usize, param: String },

    #[error("starvation at tick {tick}: no action available")]
    Starvation { tick: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }
}
