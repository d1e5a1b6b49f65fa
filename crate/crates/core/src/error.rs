use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {what} = {index}, limit {limit}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("malformed geometry: {0}")]
    Geometry(String),

    #[error("mdp is not well-formed: {0}")]
    InvalidMdp(String),

    #[error("improper mdp: {0}")]
    ImproperMdp(String),

    #[error("value iteration did not converge within {iters} iterations (residual {residual:e})")]
    NoConvergence { iters: usize, residual: f64 },

    #[error("state {0} is terminal")]
    TerminalState(usize),

    #[error("linear policy undefined: state {state} has negative h-value {value}")]
    NegativeLinearWeight { state: usize, value: f64 },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
