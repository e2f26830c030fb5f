use thiserror::Error;

use crate::network::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("polynomial has no nonzero coefficients")]
    DegeneratePolynomial,
    #[error("polynomial must have degree >= 1 to have roots")]
    ConstantPolynomial,
    #[error("polynomial is not monic (leading coefficient {0})")]
    NotMonic(f64),
    #[error("root {modulus} lies within {tol} of the unit circle")]
    RootOnUnitCircle { modulus: f64, tol: f64 },
    #[error("polynomial has non-finite coefficients")]
    NonFiniteCoefficients,
    #[error("eigenvalue iteration for the roots did not converge")]
    RootFindingFailed,
    #[error("highest-lag coefficient of the anti-stable factor is zero")]
    ZeroTrailingCoefficient,
    #[error("complex root {re}+{im}i has no conjugate partner")]
    UnpairedComplexRoot { re: f64, im: f64 },
    #[error("denominator vanishes on the unit circle at omega = {omega}")]
    PoleOnUnitCircle { omega: f64 },

    #[error("invalid network: {0}")]
    InvalidNetwork(ValidationReport),
    #[error("unknown built-in case `{0}`")]
    UnknownCase(String),
    #[error("node {node} is not valid here: {reason}")]
    InvalidNode { node: usize, reason: String },
    #[error("predictor filter is unstable (max pole modulus {0})")]
    UnstableFilter(f64),

    #[error("invalid kernel hyperparameters: {0}")]
    InvalidKernel(String),
    #[error("kernel is singular (lambda = {lambda}, beta = {beta})")]
    DegenerateKernel { lambda: f64, beta: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid identification setup: {0}")]
    InvalidSetup(String),
    #[error("linear system is numerically singular (condition estimate {condition:e})")]
    IllConditioned { condition: f64 },
    #[error("normal equations for theta are singular (rank {rank} of {size})")]
    SingularNormalEquations { rank: usize, size: usize },
    #[error("noise variance update returned a nonpositive value {0}")]
    NonpositiveVariance(f64),

    #[error("reference vector is constant; fit is undefined")]
    ConstantTruth,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("prediction-error predictor became unstable")]
    UnstablePredictor,
    #[error("leading denominator coefficient {0} is too small for deconvolution")]
    NearZeroLeadingDenominator(f64),
    #[error("{0}")]
    Unsupported(String),
}
