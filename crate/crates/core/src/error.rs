use thiserror::Error;

/// Failures raised by the numerical pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("Mezincescu closure requested without a boundary density")]
    MissingDensity,
    #[error("boundary density undefined: {0}")]
    DensityUndefined(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("expression error in `{expr}`: {msg}")]
    Expression { expr: String, msg: String },
    #[error("degenerate ground state: gap {gap:.3e} below threshold {threshold:.3e}")]
    DegenerateGroundState { gap: f64, threshold: f64 },
    #[error("eigensolver did not converge after {0} iterations")]
    NonConvergence(usize),
    #[error("energy {0} is within tolerance of an eigenvalue")]
    BoundaryAmbiguous(f64),
    #[error("energy {energy} too close to the spectrum (distance {distance:.3e})")]
    Resonant { energy: f64, distance: f64 },
    #[error("regime violated: {0}")]
    Regime(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("case label OTHER: expansion is neither linear nor quadratic")]
    CaseOther,
    #[error("invalid disorder law: {0}")]
    InvalidLaw(String),
}

pub type Result<T> = std::result::Result<T, Error>;
