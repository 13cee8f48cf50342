use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("ellipticity violated at node {node:?}: min eigenvalue {lambda_min:.6e}")]
    Ellipticity { node: Vec<usize>, lambda_min: f64 },

    #[error("coefficient spec rejected: {0}")]
    CoefficientSpec(String),

    #[error(
        "solver did not converge within {iterations} iterations \
         (relative residual {residual:.3e}, target {target:.3e})"
    )]
    SolverDiverged {
        iterations: usize,
        residual: f64,
        target: f64,
        history: Vec<f64>,
    },

    #[error("annulus [{inner}, {outer}) around {center:?} exceeds the grid extent {extent}")]
    TruncationOverflow {
        inner: f64,
        outer: f64,
        center: Vec<f64>,
        extent: f64,
    },

    #[error("positivity violated at node {node:?}: value {value:.6e}")]
    Positivity { node: Vec<usize>, value: f64 },

    #[error("kernel extraction failed: {0}")]
    Kernel(String),

    #[error("far-field window unusable: {0}")]
    Window(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("estimated working set {required_bytes} B exceeds memory budget {budget_bytes} B")]
    MemoryBudget {
        required_bytes: u64,
        budget_bytes: u64,
    },

    #[error("binary field format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
