use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum QecError {
    #[error("rotation matrix is not orthonormal (||RᵀR − I||∞ = {error:e})")]
    NonOrthonormalInput { error: f64 },

    #[error("empty input set")]
    EmptyInput,

    #[error("all weights are zero")]
    AllZeroWeights,

    #[error("invalid weight {0}: weights must be finite and nonnegative")]
    NegativeWeight(f64),

    #[error("dominant eigenvalue is not simple (gap {gap:e}, λ1 = {lambda:e})")]
    DegenerateSpectrum { gap: f64, lambda: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("activation {0} outside [0, 1]")]
    InvalidActivation(f64),

    #[error("all input activations are zero")]
    AllZeroActivations,

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("degenerate patch: {0}")]
    DegeneratePatch(String),

    #[error("no point of the patch has a tangential component")]
    DegenerateTangent,

    #[error("bad target class {target} for {classes} classes")]
    BadTarget { target: usize, classes: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("geometry is empty")]
    EmptyGeometry,

    #[error("mesh has zero surface area")]
    ZeroArea,

    #[error("requested {requested} points from a cloud of {available}")]
    TooManyRequested { requested: usize, available: usize },

    #[error("cloud has {available} points with frames, need at least {required}")]
    InsufficientPoints { available: usize, required: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, sample {sample}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        sample: usize,
        detail: String,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, QecError>;
