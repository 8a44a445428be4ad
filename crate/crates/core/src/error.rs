use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("diffusion coefficient is not elliptic at ({x}, {y}): value {value}")]
    NotElliptic { x: f64, y: f64, value: f64 },

    #[error("matrix is singular")]
    Singular,

    #[error("matrix is not positive definite (p^T A p = {curvature:e})")]
    Indefinite { curvature: f64 },

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged {
        solver: &'static str,
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("local problem on coarse element {element} failed: {source}")]
    LocalProblem {
        element: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("splitting iterations stopped after {iterations} iterations without reaching the tolerance (last residual {last:e})")]
    SplittingDiverged {
        iterations: usize,
        last: f64,
        residuals: Vec<f64>,
    },

    #[error("fine mesh infeasible: need h <= {required_h:e}, i.e. {unknowns} unknowns")]
    InfeasibleMesh { required_h: f64, unknowns: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("relative error undefined: reference field has zero norm")]
    ZeroReference,

    #[error("non-positive error value {0} in rate estimation")]
    NonPositiveError(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
