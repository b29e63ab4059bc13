//! Differential-game decision making for autonomous vehicles at an
//! unsignalized intersection.
//!
//! The crate simulates a set of vehicles crossing a multi-lane unsignalized
//! intersection. Each vehicle carries an aggressiveness coefficient that
//! trades passing efficiency against safety in its running cost. Collision
//! risk is assessed with a Gaussian potential field around each predicted
//! path; while the pairwise risk at a predicted conflict point exceeds a safe
//! threshold, the pair resolves its conflict through an open-loop differential
//! game (Nash or Stackelberg), re-solved every sampling step in receding
//! horizon fashion.
//!
//! Module map:
//! * [`scenario`] — intersection geometry, routes, conflicts, roles, zones;
//! * [`vehicle`] — kinematic bicycle model and integration;
//! * [`risk`] — potential field, trajectory prediction, event trigger;
//! * [`cost`] — running cost and payoff;
//! * [`game`] — best responses, Nash and Stackelberg solvers;
//! * [`pmp`] — costate-based optimality certificates;
//! * [`engine`] — the receding-horizon simulation loop and logging;
//! * [`scenario_file`] — scenario file schema, parsing, config hash;
//! * [`fixtures`] — built-in benchmark scenarios.

pub mod cost;
pub mod engine;
pub mod error;
pub mod fixtures;
pub mod game;
pub mod geom;
pub mod pmp;
pub mod risk;
pub mod scenario;
pub mod scenario_file;
pub mod vehicle;

pub use error::{Error, Result};
