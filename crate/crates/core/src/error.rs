use crate::bridge::BridgeError;
use crate::coalition::Coalition;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("csv error at row {row}, column {column}: {message}")]
    Csv {
        row: usize,
        column: String,
        message: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("coalition table incomplete: {missing} coalition(s) missing, first {first}")]
    IncompleteTable { missing: usize, first: Coalition },

    #[error("non-finite contribution value for coalition {0}")]
    NonFinite(Coalition),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("regression fit failed for coalition {coalition}: {message}")]
    FitFailed {
        coalition: Coalition,
        message: String,
    },

    #[error("regression error: {0}")]
    Regression(String),

    #[error("estimator error: {0}")]
    Estimator(String),

    #[error("axiom violated: {axiom}; game = {game}")]
    AxiomViolation { axiom: String, game: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Bridge(#[from] BridgeError),

    #[error("instance {instance}, coalition {coalition}: {source}")]
    AtCoalition {
        instance: usize,
        coalition: Coalition,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Attaches the instance/coalition being evaluated when the error arose.
    pub fn at(self, instance: usize, coalition: Coalition) -> Error {
        match self {
            e @ Error::AtCoalition { .. } => e,
            e => Error::AtCoalition {
                instance,
                coalition,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, looking through location wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtCoalition { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn is_bridge(&self) -> bool {
        matches!(self.root(), Error::Bridge(_))
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        let row = err
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or_default();
        Error::Csv {
            row,
            column: String::new(),
            message: err.to_string(),
        }
    }
}
