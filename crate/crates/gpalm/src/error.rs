use nalgebra::DVector;
use thiserror::Error;

/// State of the last scoring iterate, carried by [`Error::NonConvergence`] so
/// callers can still report diagnostics for a failed fit.
#[derive(Debug, Clone)]
pub struct PartialFit {
    pub beta: DVector<f64>,
    pub gamma: DVector<f64>,
    pub iterations: usize,
    pub objective: f64,
    pub ee_norm: f64,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("parse error at line {line}, column `{column}`: {message}")]
    Parse {
        line: u64,
        column: String,
        message: String,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("degenerate support: {0}")]
    DegenerateSupport(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("matrix is not positive definite (smallest eigenvalue {pivot:.3e})")]
    NearSingular { pivot: f64 },

    #[error("singular design: normal matrix is rank deficient (null space dimension {nullity})")]
    SingularDesign { nullity: usize },

    #[error(
        "fit did not converge after {} iterations (estimating-equation norm {:.3e})",
        .0.iterations, .0.ee_norm
    )]
    NonConvergence(Box<PartialFit>),

    #[error("cannot estimate correlation: {0}; consider the independence structure")]
    CannotEstimateCorrelation(String),

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("inference failed: {0}")]
    Inference(String),

    #[error("model selection failed: {0}")]
    Selection(String),

    #[error("simulation study failed: {0}")]
    Study(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
}

pub type Result<T> = std::result::Result<T, Error>;
