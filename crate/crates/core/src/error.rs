use thiserror::Error;

/// Failure modes shared by every module of the crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NvcsError {
    #[error("parameter domain violated: {0}")]
    Domain(String),
    #[error("deformation singular at n = {n}: {detail}")]
    Singularity { n: usize, detail: String },
    #[error("factorial vanishes: basic number is zero at m = {m}")]
    ZeroFactorial { m: usize },
    #[error("index out of range: {0}")]
    Index(String),
    #[error("infinite product or series diverges: {0}")]
    Divergence(String),
    #[error("series did not converge within {terms} terms")]
    ConvergenceCap { terms: usize },
    #[error("degenerate level at n = {n}: Q = {q:e}")]
    DegenerateLevel { n: usize, q: f64 },
    #[error("label outside the convergence disc: |z| = {modulus} >= R = {radius}")]
    Radius { modulus: f64, radius: f64 },
    #[error("structure function vanishes at n = {0}")]
    ZeroStructure(usize),
    #[error("basis mismatch: {0}")]
    Basis(String),
    #[error("matrix exponential inaccurate: {0}")]
    Exponential(String),
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
}

pub type Result<T> = std::result::Result<T, NvcsError>;
