use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // -- autodiff --
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("variable {0} does not track gradients")]
    Detached(usize),
    #[error("precondition violated: {0}")]
    Precondition(String),

    // -- model --
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds the context of {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("neuron index {index} out of range for width {width}")]
    NeuronIndex { index: usize, width: usize },
    #[error("layer mismatch: {0}")]
    LayerMismatch(String),
    #[error("training diverged at step {step}: loss {loss} above initial {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },

    // -- checkpoint --
    #[error("checkpoint version {found} not supported (expected {expected})")]
    Version { found: String, expected: String },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed artifact: {0}")]
    Format(String),

    // -- tasks --
    #[error("out-of-vocabulary symbol `{0}`")]
    OutOfVocabulary(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("empty input: {0}")]
    Empty(String),

    // -- detection --
    #[error("no copying prompts found; detection cannot proceed")]
    NoCopyingPrompts,

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::Graph(_) => "graph",
            Error::Detached(_) => "detached",
            Error::Precondition(_) => "precondition",
            Error::Config(_) => "config",
            Error::ContextOverflow { .. } => "context_overflow",
            Error::NeuronIndex { .. } => "neuron_index",
            Error::LayerMismatch(_) => "layer_mismatch",
            Error::Diverged { .. } => "diverged",
            Error::Version { .. } => "version",
            Error::Truncated(_) => "truncated",
            Error::Checksum { .. } => "checksum",
            Error::Format(_) => "format",
            Error::OutOfVocabulary(_) => "out_of_vocabulary",
            Error::UnknownTask(_) => "unknown_task",
            Error::Empty(_) => "empty",
            Error::NoCopyingPrompts => "no_copying_prompts",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
