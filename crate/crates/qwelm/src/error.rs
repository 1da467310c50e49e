//! Crate-wide error type.

use thiserror::Error;

/// Everything that can go wrong while building devices, computing statistics,
/// training readouts, or running configured experiments.
#[derive(Debug, Error)]
pub enum QelmError {
    /// A constructor or operation received an argument outside its domain.
    #[error("invalid {name}: {reason}")]
    InvalidParameter {
        /// Name of the offending parameter.
        name: &'static str,
        /// Human-readable description of the violated constraint.
        reason: String,
    },

    /// The walk scatters population onto OAM modes outside the measurement
    /// window and the truncation policy forbids discarding it.
    #[error(
        "walk support leaks outside the OAM measurement window [{window_min}, {window_max}]: \
         reachable modes {leaked:?} would be discarded"
    )]
    Truncation {
        /// Lower edge of the measurement window.
        window_min: i64,
        /// Upper edge of the measurement window.
        window_max: i64,
        /// Reachable modes that fall outside the window.
        leaked: Vec<i64>,
    },

    /// Both finite-difference sample points snapped to the same grid node, so
    /// no gradient information is available at this step size.
    #[error(
        "finite-difference displacement ±{epsilon_deg}° around {angle_deg}° collapses to a \
         single node of the {grid_step_deg}° angle grid"
    )]
    GridCollision {
        /// Coordinate value about which the gradient was requested.
        angle_deg: f64,
        /// Requested half-width of the central difference.
        epsilon_deg: f64,
        /// Grid resolution that swallowed the displacement.
        grid_step_deg: f64,
    },

    /// A state, matrix, or feature map has no usable content (zero norm,
    /// empty collection, all-zero rows, …).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Two objects that must share dimensions do not.
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        /// Operation that detected the mismatch.
        context: &'static str,
        /// Dimension the operation requires.
        expected: String,
        /// Dimension it received.
        found: String,
    },

    /// The run configuration file could not be parsed or fails validation.
    #[error("configuration error: {0}")]
    Config(String),

    /// Failure while reading or writing run artifacts.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Convenient alias used throughout the crate.
pub type Result<T> = std::result::Result<T, QelmError>;

impl QelmError {
    /// Shorthand for [`QelmError::InvalidParameter`].
    pub fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        QelmError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
