//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("pressure solve failed at timestep {step}: {reason}")]
    PressureSolve { step: usize, reason: String },

    #[error("saturation update failed at timestep {step}: {reason}")]
    SaturationUpdate { step: usize, reason: String },

    #[error("covariance not positive semidefinite: min eigenvalue {min_eig:.3e} below tolerance")]
    NotPsd { min_eig: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("rbf fit ill-conditioned (estimated condition {cond:.3e}): {context}")]
    IllConditioned { cond: f64, context: String },

    #[error("duplicate or near-duplicate rbf centers: {0}")]
    DuplicateCenter(String),

    #[error("kernel {kernel} is not differentiable at a center")]
    NonDifferentiableKernel { kernel: String },

    #[error("coupling iteration did not converge at timestep {step} (residual {residual:.3e})")]
    CouplingDiverged { step: usize, residual: f64 },

    #[error("adjoint system singular for subdomain {subdomain} at timestep {step}")]
    AdjointSingular { subdomain: usize, step: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unscheduled measurement time requested: step {0}")]
    Unscheduled(usize),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
}

impl Error {
    /// Wrap an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
