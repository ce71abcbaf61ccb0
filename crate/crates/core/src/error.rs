use thiserror::Error;

/// Errors raised by the numerical routines in this crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument lies outside the region where the formula is valid.
    #[error("domain error: {0}")]
    Domain(String),
    /// A malformed argument (wrong length, mismatched lattice, ...).
    #[error("argument error: {0}")]
    Argument(String),
    /// The lattice does not resolve a length scale the computation needs.
    #[error("resolution error: {0}")]
    Resolution(String),
    /// A conditional Monte Carlo estimator saw no qualifying samples.
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    /// A quadrature did not reach its tolerance.
    #[error("quadrature did not converge: achieved relative change {achieved:.3e}, target {target:.3e}")]
    Quadrature { achieved: f64, target: f64 },
    /// The sample distribution has a tail heavy enough to invalidate the standard error.
    #[error("heavy-tailed sample: excess kurtosis {0:.1}")]
    HeavyTailed(f64),
    /// The requested combination is not supported by a closed-form reduction.
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

pub(crate) fn argument<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
