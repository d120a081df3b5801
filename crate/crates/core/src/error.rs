use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A query point lies outside the region a field is defined on.
    #[error("out of range: {0}")]
    Range(String),

    /// A linear system or design matrix is rank deficient.
    #[error("singular: {0}")]
    Singular(String),

    /// Force magnitude too small to define a contact normal.
    #[error("no contact: force magnitude {magnitude} N is below the {floor} N floor")]
    NoContact { magnitude: f64, floor: f64 },

    /// Integration step too coarse for the dynamics it advances.
    #[error("resolution: {0}")]
    Resolution(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Closed-loop force ran away and the run was aborted.
    #[error("unstable run at t = {t:.3} s: |force| {force:.3} N exceeds {limit:.3} N")]
    Unstable { t: f64, force: f64, limit: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
