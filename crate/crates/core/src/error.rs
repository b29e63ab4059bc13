//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// A route has fewer than two waypoints or a non-increasing arc length.
    InvalidRoute(String),
    /// A mathematical precondition was violated (e.g. |delta_f| >= pi/2).
    Domain(String),
    /// A state, control or intermediate value became non-finite.
    NonFinite(String),
    /// Vehicle is too far from its route for prediction or cost evaluation.
    OffRoute { vehicle: String, distance: f64 },
    /// Longitudinal gap to the leading vehicle is not positive.
    Overlap { gap: f64 },
    /// Trajectories passed to the payoff do not share a time grid.
    GridMismatch { expected: usize, got: usize },
    /// Scenario file failed validation.
    Scenario(String),
    /// Solver failed in a way the engine cannot recover from.
    Solver(String),
    /// Two vehicles came closer than the collision threshold.
    Collision {
        time: f64,
        a: String,
        b: String,
        distance: f64,
    },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidRoute(msg) => write!(f, "invalid route: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::OffRoute { vehicle, distance } => {
                write!(f, "vehicle {vehicle} is {distance:.2} m off its route")
            }
            Error::Overlap { gap } => {
                write!(f, "longitudinal gap {gap:.3} m is not positive (overlap)")
            }
            Error::GridMismatch { expected, got } => {
                write!(f, "time grid mismatch: expected {expected} steps, got {got}")
            }
            Error::Scenario(msg) => write!(f, "scenario error: {msg}"),
            Error::Solver(msg) => write!(f, "solver error: {msg}"),
            Error::Collision { time, a, b, distance } => write!(
                f,
                "collision between {a} and {b} at t = {time:.2} s (center distance {distance:.3} m)"
            ),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
