use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix not positive definite at pivot {pivot} (value {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("eigen iteration did not converge (residual {residual:e})")]
    NoConvergence { residual: f64 },
    #[error("non-finite value in linear algebra")]
    NonFinite,
    #[error("empty system")]
    Empty,
}

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("degenerate metric at {point:?}")]
    DegenerateMetric { point: Vec<f64> },
    #[error("point {point:?} outside the chart domain")]
    OutsideChart { point: Vec<f64> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("x_{side} is not a critical point: |grad V| = {grad_norm:e}")]
    NotCritical { side: &'static str, grad_norm: f64 },
    #[error("sigma*H^V at x_{side} is not negative definite (eigenvalues {eigs:?})")]
    NotMaximum { side: &'static str, eigs: Vec<f64> },
    #[error("ball calibration failed: no radius above {floor:e} satisfies `{inequality}`")]
    Calibration { floor: f64, inequality: String },
    #[error("no solution: {0}")]
    NoSolution(String),
    #[error("indefinite Hessian (gamma = {gamma:e})")]
    IndefiniteHessian { gamma: f64 },
    #[error("Newton did not converge in {iterations} iterations (residual {residual:e})")]
    MaxIterations { iterations: usize, residual: f64 },
    #[error("seed failed: {0}")]
    Seed(String),
    #[error("window schedule stalled: {0}")]
    ScheduleStall(String),
    #[error("expression error: {0}")]
    Expr(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("state file version {found} does not match supported version {expected}")]
    StateVersion { found: u32, expected: u32 },
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
