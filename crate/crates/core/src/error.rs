use thiserror::Error;

/// Errors raised by the laboratory's numerical operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite {what} at t={t}, x={x:?}, u={u:?}")]
    NonFinite {
        what: &'static str,
        t: f64,
        x: Vec<f64>,
        u: Vec<f64>,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "analytic {0} not supplied; allow the finite-difference fallback \
         (GradientPolicy::AllowFiniteDifference) or supply the gradient"
    )]
    MissingGradient(&'static str),

    #[error("path {path} diverged at step {step} (|X| = {norm:e})")]
    BlowUp { path: usize, step: usize, norm: f64 },

    #[error("diffusion matrix is singular at t={t}, x={x:?} (condition number {cond:e})")]
    SingularDiffusion { t: f64, x: Vec<f64>, cond: f64 },

    #[error("ellipticity check failed: {0}")]
    Ellipticity(String),

    #[error("regression produced non-finite coefficients at slice {slice}")]
    Regression { slice: usize },

    #[error("no contraction: Cauchy gaps failed to decrease over {0} consecutive horizons")]
    NoContraction(usize),

    #[error("no convergence: {0}")]
    NotConverged(String),

    #[error("no positive Riccati root for a={a}, q={q}, r={r}")]
    NoRiccatiRoot { a: f64, q: f64, r: f64 },

    #[error("missing constant {0}; run the model checks first")]
    MissingConstant(&'static str),

    #[error("horizon {requested} exceeds the solved adjoint range (max {max})")]
    HorizonOutOfRange { requested: f64, max: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
