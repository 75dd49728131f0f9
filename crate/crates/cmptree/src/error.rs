use thiserror::Error;

/// Errors produced by the fitting and distribution routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Parameters outside the distribution's domain, or an invalid control value.
    #[error("invalid domain: {0}")]
    Domain(String),

    /// The normalizing series did not reach the requested tolerance within
    /// `max_terms` terms. Signals lambda too large / nu too small for the policy.
    #[error("series did not converge within {max_terms} terms (lambda={lambda:e}, nu={nu:e})")]
    NonConvergent {
        lambda: f64,
        nu: f64,
        max_terms: usize,
    },

    /// A weighted cross-product matrix is numerically singular.
    #[error("singular design matrix: {0}")]
    SingularDesign(String),

    /// Every candidate split violates the minimum node size.
    #[error("no admissible split satisfies the node-size constraint")]
    NoValidSplit,

    /// The moderator has fewer than two distinct values.
    #[error("moderator has fewer than two distinct values")]
    DegenerateModerator,

    /// Inconsistent dimensions between inputs.
    #[error("dimension mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, Error>;
