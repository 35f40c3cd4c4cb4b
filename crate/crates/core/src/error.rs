use std::fmt;

/// Errors surfaced by the tensor graph, the model pipeline, and file I/O.
#[derive(Debug)]
pub enum Error {
    /// Incompatible tensor shapes; the message names both operands.
    Shape { op: &'static str, detail: String },
    /// A scalar argument is outside its legal range.
    Param { what: String },
    /// A configuration value violates an invariant.
    Config { what: String },
    /// Gather/scatter index out of range or duplicated.
    Index { what: String },
    /// An API contract was violated (e.g. backward on a non-scalar).
    Contract { what: String },
    /// Math domain violation (e.g. log of a non-positive value).
    Domain { what: String },
    /// Token assembly did not cover the position grid exactly.
    Assembly { missing: Vec<usize>, duplicate: Vec<usize> },
    /// Input data violates its declared invariants.
    Data { what: String },
    /// Training aborted; carries a diagnostic dump.
    Training { what: String },
    /// Checkpoint file is malformed or inconsistent.
    Checkpoint { what: String },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Shape { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Self::Param { what } => write!(f, "invalid parameter: {what}"),
            Self::Config { what } => write!(f, "invalid config: {what}"),
            Self::Index { what } => write!(f, "index error: {what}"),
            Self::Contract { what } => write!(f, "contract violation: {what}"),
            Self::Domain { what } => write!(f, "domain error: {what}"),
            Self::Assembly { missing, duplicate } => write!(
                f,
                "assembly coverage error: missing positions {missing:?}, duplicated positions {duplicate:?}"
            ),
            Self::Data { what } => write!(f, "data error: {what}"),
            Self::Training { what } => write!(f, "training aborted: {what}"),
            Self::Checkpoint { what } => write!(f, "checkpoint error: {what}"),
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
