use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unit size and unit count must be positive (got n={n}, m={m})")]
    ZeroSize { n: usize, m: usize },

    #[error("invalid adjacency: {0}")]
    InvalidAdjacency(String),

    #[error("invalid decomposition: {0}")]
    InvalidDecomposition(String),

    #[error("graph with {nodes} nodes is not divisible into units of size {n}")]
    NotDivisible { nodes: usize, n: usize },

    #[error("inconsistent diagonal blocks: block {block} differs from block 0")]
    InconsistentDiagonal { block: usize },

    #[error("unequal off-diagonal blocks: block ({row}, {col}) differs from the first connected block")]
    InconsistentNeighborhood { row: usize, col: usize },

    #[error("empty graph: {0}")]
    EmptyGraph(&'static str),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config mismatch in fields: {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),

    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
