//! Error types shared across the engine.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    /// Structural mismatch between operands (dims, caps, shapes).
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A small divisor fell below its nonresonance floor.
    #[error("small divisor at k={k:?}: |divisor| = {divisor:.6e} below floor {floor:.6e}")]
    SmallDivisor {
        k: Vec<i64>,
        divisor: f64,
        floor: f64,
    },

    /// A linear solve was accepted but its condition estimate is suspect.
    #[error("ill-conditioned solve: condition estimate {cond:.3e}")]
    Conditioning { cond: f64 },

    /// A nondegeneracy floor (C1/C2/S-conditions or an eigenvalue floor) failed.
    #[error("floor violation in {which}: lambda_min = {lambda_min:.6e} < {floor:.6e}")]
    FloorViolation {
        which: String,
        lambda_min: f64,
        floor: f64,
    },

    /// Damped Newton did not reach the residual target.
    #[error("Newton did not converge: residual {residual:.6e} after {iters} iterations")]
    NewtonDiverged { residual: f64, iters: usize },

    /// Generator assembly ran with excluded shells.
    #[error("partial assembly: {} shells excluded (first: {:?})", excluded.len(), excluded.first())]
    PartialAssembly { excluded: Vec<Vec<i64>> },

    /// A KAM step was rejected; the certificate carries the diagnosis.
    #[error("KAM step {step} rejected: {reason}")]
    StepRejected { step: usize, reason: String },

    /// Invalid argument or domain data.
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite values or a numerically meaningless result.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Condition checks require lambda-derivative data that was not supplied.
    #[error("missing derivative data: {0}")]
    MissingDerivatives(String),

    /// Configuration parse or validation failure.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EngineError>;
