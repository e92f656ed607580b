use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is not on the guard: |g(x)| = {residual:e} exceeds {tolerance:e}")]
    NotOnGuard { residual: f64, tolerance: f64 },

    #[error("guard gradient vanishes at the evaluated point")]
    DegenerateGuard,

    #[error("numerical rank {found} does not match declared rank {declared}")]
    RankMismatch { declared: usize, found: usize },

    #[error("problem supplies no closed-form control minimizer")]
    NoMinimizer,

    #[error("step size underflow at t = {t}")]
    StepFailure { t: f64 },

    #[error("pre-reset co-state violates the fiber consistency condition (residual {residual:e})")]
    InconsistentCostate { residual: f64 },

    #[error("no convergence: best residual {best_residual:e} after {} start(s); {detail}", starts.len())]
    NoConvergence {
        best_residual: f64,
        starts: Vec<Vec<f64>>,
        detail: String,
    },

    #[error("no guard crossing follows the reset within the horizon")]
    NoNextCrossing,

    #[error("outside the domain of a closed-form expression: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
