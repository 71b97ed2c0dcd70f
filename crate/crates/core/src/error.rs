use thiserror::Error;

/// Errors raised by the numerical routines of this crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A caller-supplied argument violates a documented precondition.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Evaluation outside the open time domain of a forward process.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported scheme: {0}")]
    UnsupportedScheme(String),

    /// An interpolation map could not be inverted to tolerance.
    #[error("singular map: residual {residual:.3e} after {iterations} iterations")]
    SingularMap { residual: f64, iterations: usize },

    /// The adaptive integrator drove its step below the representable minimum.
    #[error("stiffness: step {step:.3e} underflowed at t = {t:.6} (rejected {rejected} steps)")]
    Stiffness { t: f64, step: f64, rejected: usize },

    #[error("characteristic crossing at t = {t:.6}, x = {x:.6}")]
    CharacteristicCrossing { t: f64, x: f64 },

    #[error("computation error: {0}")]
    Computation(String),

    /// A failure inside a reverse run, tagged with the node index it occurred at.
    #[error("at node {node}: {source}")]
    AtNode {
        node: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn computation(msg: impl Into<String>) -> Self {
        Error::Computation(msg.into())
    }

    pub(crate) fn at_node(self, node: usize) -> Self {
        Error::AtNode {
            node,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
