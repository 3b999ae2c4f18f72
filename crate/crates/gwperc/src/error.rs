use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid offspring distribution: {0}")]
    InvalidDistribution(String),
    #[error("offspring mean {0} is not supercritical")]
    Subcritical(f64),
    #[error("moment of order {needed} unavailable (exact up to {available})")]
    MomentUnavailable { needed: usize, available: usize },
    #[error("solver did not converge (residual {residual:e})")]
    NonConvergence { residual: f64 },
    #[error("population cap exceeded at level {level} ({population} vertices)")]
    PopulationCap { level: usize, population: u64 },
    #[error("enumeration budget exceeded: {0}")]
    Budget(String),
    #[error("table caps too small: need J >= {need_j}, Kc >= {need_k}")]
    CapOverflow { need_j: usize, need_k: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
