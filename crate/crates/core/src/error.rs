use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("mesh level {level} out of range (expected 1..={max})")]
    LevelOutOfRange { level: u32, max: u32 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinearSolveError {
    #[error("conjugate gradient did not converge: {iterations} iterations, relative residual {residual:e}")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("conjugate gradient breakdown (non-positive curvature {curvature:e})")]
    Breakdown { curvature: f64 },
    #[error("sparse Cholesky factorization failed: {0}")]
    Factorization(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("state belongs to a different space")]
    SpaceMismatch,
    #[error("element weight {value} on triangle {triangle} is not a positive number")]
    InvalidWeight { triangle: usize, value: f64 },
    #[error(transparent)]
    LinearSolve(#[from] LinearSolveError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("noise dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid noise parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemeError {
    #[error("invalid scheme parameters: {0}")]
    InvalidParams(String),
    #[error("step {step}: fixed-point iteration did not converge in {iterations} iterations (update {residual:e})")]
    FixedPointDivergence { step: usize, iterations: usize, residual: f64 },
    #[error("step {step}: {source}")]
    LinearSolve { step: usize, source: LinearSolveError },
    #[error(transparent)]
    Fe(#[from] FeError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FunctionalError {
    #[error("invalid exponent: {0}")]
    InvalidExponent(String),
    #[error("time {t} outside [0, {t_final}]")]
    TimeOutOfRange { t: f64, t_final: f64 },
    #[error(transparent)]
    Fe(#[from] FeError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum McError {
    #[error("realization {index} failed: {source}")]
    Realization { index: usize, source: SchemeError },
    #[error("invalid Monte Carlo plan: {0}")]
    InvalidPlan(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Fe(#[from] FeError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error(transparent)]
    Mc(#[from] McError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}
