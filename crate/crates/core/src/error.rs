use thiserror::Error;

/// Errors produced by the simulator core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("infeasible AP selection: common power {common_power} W at AP {ap} exceeds budget {p_max} W")]
    Infeasible { ap: usize, common_power: f64, p_max: f64 },

    #[error("instance too large for enumeration: {vars} binary variables (limit {limit})")]
    TooLarge { vars: usize, limit: usize },

    #[error("replay buffer is empty")]
    EmptyReplay,

    #[error("sync error: {0}")]
    Sync(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_check(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape { expected, got })
    }
}
