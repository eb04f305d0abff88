//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Underlying file I/O failure.
    Io(std::io::Error),
    /// Malformed or inconsistent configuration.
    Config(String),
    /// Array shapes or grids that must match do not.
    ShapeMismatch(String),
    /// A scatterer that the forward model cannot image (e.g. behind the array).
    InvalidScatterer(String),
    /// Requested crop centre lies outside the imaging field of view.
    TargetLost,
    /// Registration has no overlapping support between the two volumes.
    NoOverlap,
    /// Degenerate optimisation input (e.g. a constant volume has no gradient).
    DegenerateInput(String),
    /// Volume carries no signal where some is required.
    EmptyVolume,
    /// Not enough data points for the requested fit.
    Underdetermined,
    /// Fewer isolated bubble instances than needed for PSF estimation.
    InsufficientPsfInstances { found: usize, needed: usize },
    /// Input artifacts were produced from different configurations.
    ConfigHashMismatch { expected: String, found: String },
    /// Malformed on-disk artifact.
    Format(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::InvalidScatterer(msg) => write!(f, "invalid scatterer: {msg}"),
            Error::TargetLost => write!(f, "crop centre outside the field of view (target lost)"),
            Error::NoOverlap => write!(f, "no overlapping support between volumes"),
            Error::DegenerateInput(msg) => write!(f, "degenerate input: {msg}"),
            Error::EmptyVolume => write!(f, "volume carries no signal"),
            Error::Underdetermined => write!(f, "not enough data points"),
            Error::InsufficientPsfInstances { found, needed } => write!(
                f,
                "found {found} isolated bubble instances, need {needed}; \
                 acquire longer or lower the bubble concentration"
            ),
            Error::ConfigHashMismatch { expected, found } => write!(
                f,
                "config hash mismatch: expected {expected}, found {found}"
            ),
            Error::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
