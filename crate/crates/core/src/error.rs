//! Error type shared across the workspace.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch between operands.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid parameter value (window size, rates, grids).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Matrix failed a positive-definiteness requirement.
    #[error("definiteness error: {0}")]
    Definiteness(String),

    /// Iterative solver hit its iteration cap.
    #[error("convergence error: off-diagonal residual {residual:e} after {sweeps} sweeps")]
    Convergence { residual: f64, sweeps: usize },

    /// Spectrum degenerate for the requested quantity (e.g. edgeless graph).
    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    /// Operation requires a connected graph.
    #[error("disconnected graph: {0}")]
    Disconnected(String),

    /// Operation requires a symmetric operator.
    #[error("symmetry error: {0}")]
    Symmetry(String),

    /// Invalid model/experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A computation produced NaN/Inf where finiteness is required.
    #[error("non-finite result: {0}")]
    NonFinite(String),

    /// The differentiation engine cannot provide the requested derivative.
    #[error("capability error: {0}")]
    Capability(String),

    /// Malformed serialized data (graph text, checkpoints, configs).
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
