use thiserror::Error;

use crate::protect::MarvellSolution;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("singular divergence: {0}")]
    SingularDivergence(String),

    #[error("numerical overflow: {0}")]
    NumericalOverflow(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    /// The iterate returned is the best point seen before giving up.
    #[error("no convergence: {message}")]
    Convergence {
        message: String,
        best: Option<Box<MarvellSolution>>,
    },

    #[error("strategy unavailable: {0}")]
    StrategyUnavailable(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("hash collision: {0}")]
    Collision(String),

    #[error("transport: {0}")]
    Transport(#[from] std::io::Error),

    #[error("config: {0}")]
    Config(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// Short module-style tag used by the CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Argument(_) => "argument",
            Error::DegenerateData(_) => "degenerate-data",
            Error::UndefinedAuc(_) => "undefined-auc",
            Error::SingularDivergence(_) => "singular",
            Error::NumericalOverflow(_) => "overflow",
            Error::Protocol(_) => "protocol",
            Error::Convergence { .. } => "convergence",
            Error::StrategyUnavailable(_) => "strategy-unavailable",
            Error::Consistency(_) => "consistency",
            Error::Collision(_) => "collision",
            Error::Transport(_) => "transport",
            Error::Config(_) => "config",
            Error::Csv(_) => "csv",
        }
    }
}
