use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("scenario: {0}")]
    Scenario(String),

    #[error("network: {0}")]
    Network(String),

    #[error("demand file: {0}")]
    Demand(String),

    #[error("destination {dest} is unreachable from origin {origin} via {mode}")]
    Unreachable {
        origin: usize,
        dest: usize,
        mode: &'static str,
    },

    #[error("action {action} ({detail}) has nonnegative utility {value}")]
    NonnegativeUtility {
        action: usize,
        detail: String,
        value: f64,
    },

    #[error(
        "value iteration for destination {dest} did not converge within {max_sweeps} sweeps \
         (residual {residual:.3e})"
    )]
    ValueIterationDiverged {
        dest: usize,
        max_sweeps: usize,
        residual: f64,
    },

    #[error("linear system is singular or ill-conditioned (pivot {pivot:.3e} at column {col})")]
    SingularSystem { col: usize, pivot: f64 },

    #[error("travel time {t:.6} below free-flow time {t0:.6} on link {link}")]
    SupplyDomain { link: String, t: f64, t0: f64 },

    #[error(
        "equilibrium search did not converge within {iterations} iterations \
         (residual {residual:.3e}, tolerance {tolerance:.3e})"
    )]
    NotConverged {
        iterations: usize,
        residual: f64,
        tolerance: f64,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
