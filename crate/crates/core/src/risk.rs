//! Gaussian potential-field collision risk and the event trigger.
//!
//! Each vehicle projects a Gaussian ridge along its predicted path. For a
//! steering angle `delta_f` the ridge is the circle of radius
//! `l / |tan delta_f|` about the turning center
//!
//! ```text
//! X_c = X_g - l_r cos(phi) + l sin(phi) / tan(delta_f)
//! Y_c = Y_g - l_r sin(phi) - l cos(phi) / tan(delta_f)
//! ```
//!
//! with amplitude `Lambda = a_0 e^kappa (s - v t_p)` and width
//! `sigma = (b + c |delta_f|) s + W/4`, where `s` is the arc length of the
//! finite-horizon prediction. Near zero steering the circle degenerates; below
//! `STRAIGHT_DELTA` the ridge is the straight predicted path and the exponent
//! uses the perpendicular distance to it, which is the analytic limit of the
//! circular form.
//!
//! The pairwise risk at a conflict point is the sum of both fields there, and
//! a pairwise game is triggered while that sum exceeds the safe threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::scenario::Route;
use crate::vehicle::{step, ControlInput, VehicleConfig, VehicleState};

/// Steering magnitude below which the field switches to the straight-ridge form.
pub const STRAIGHT_DELTA: f64 = 1e-3;
/// Pure-pursuit lookahead used by the prediction law [m].
const LOOKAHEAD: f64 = 5.0;

/// Per-vehicle potential-field coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldParams {
    /// Base amplitude coefficient.
    pub a0: f64,
    /// Widening slope of the field at zero steering.
    pub b: f64,
    /// Gain on |delta_f| in the width.
    pub c: f64,
    /// Prediction time constant [s].
    pub t_p: f64,
}

impl Default for FieldParams {
    fn default() -> Self {
        FieldParams { a0: 1.0, b: 0.05, c: 0.5, t_p: 1.0 }
    }
}

impl FieldParams {
    pub fn validate(&self) -> Result<()> {
        if self.a0 > 0.0 && self.b > 0.0 && self.c >= 0.0 && self.t_p > 0.0 {
            Ok(())
        } else {
            Err(Error::Scenario(format!("invalid field parameters: {self:?}")))
        }
    }
}

/// Finite-horizon prediction of one vehicle's motion along its route.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Time-stamped predicted positions, starting at the current pose.
    pub points: Vec<(f64, Vec2)>,
    /// Arc length of the predicted path [m].
    pub path_len: f64,
}

/// Roll the vehicle forward at constant current speed with pure-pursuit
/// steering toward the route, for `horizon` seconds at `step_len` resolution.
pub fn predict_trajectory(
    state: &VehicleState,
    route: &Route,
    horizon: f64,
    step_len: f64,
    config: &VehicleConfig,
) -> Result<Prediction> {
    let proj = route.project(state.position(), None);
    if proj.lateral.abs() > 2.0 * route.lane_width {
        return Err(Error::OffRoute { vehicle: String::new(), distance: proj.lateral.abs() });
    }
    let mut s = *state;
    let mut hint = proj.seg;
    let mut points = vec![(0.0, s.position())];
    let mut path_len = 0.0;
    let n = (horizon / step_len).round().max(1.0) as usize;
    for k in 1..=n {
        let delta = pure_pursuit(&s, route, &mut hint, config);
        let next = step(&s, &ControlInput::new(0.0, delta), step_len, config)?;
        path_len += next.position().dist(s.position());
        s = next;
        points.push((k as f64 * step_len, s.position()));
    }
    Ok(Prediction { points, path_len })
}

/// Pure-pursuit steering toward a lookahead point on the route.
pub fn pure_pursuit(state: &VehicleState, route: &Route, hint: &mut usize, config: &VehicleConfig) -> f64 {
    let proj = route.project(state.position(), Some(*hint));
    *hint = proj.seg;
    let target = route.point_at(proj.s + LOOKAHEAD);
    let to_target = target.sub(state.position());
    let alpha = crate::geom::angle_diff(to_target.angle(), state.yaw);
    let delta = (2.0 * config.wheelbase() * alpha.sin() / LOOKAHEAD).atan();
    delta.clamp(-config.delta_max, config.delta_max)
}

/// Turning-center coordinates for a nonzero steering angle; `None` signals
/// straight-driving mode (the caller uses the straight-ridge field form).
pub fn turning_center(state: &VehicleState, delta_f: f64, config: &VehicleConfig) -> Option<Vec2> {
    if delta_f.abs() < STRAIGHT_DELTA {
        return None;
    }
    let l = config.wheelbase();
    let (sin_phi, cos_phi) = state.yaw.sin_cos();
    let tan_d = delta_f.tan();
    Some(Vec2::new(
        state.x - config.l_r * cos_phi + l * sin_phi / tan_d,
        state.y - config.l_r * sin_phi - l * cos_phi / tan_d,
    ))
}

/// One vehicle's contribution parameters to a field evaluation.
#[derive(Debug, Clone, Copy)]
pub struct FieldSource<'a> {
    pub state: &'a VehicleState,
    /// Current front-wheel steering angle [rad].
    pub delta_f: f64,
    /// Arc length of the finite-horizon prediction [m].
    pub s_pred: f64,
    pub config: &'a VehicleConfig,
}

impl FieldSource<'_> {
    fn sigma(&self) -> f64 {
        (self.config.field.b + self.config.field.c * self.delta_f.abs()) * self.s_pred
            + self.config.width / 4.0
    }

    fn amplitude(&self) -> f64 {
        let f = &self.config.field;
        let lambda = f.a0 * self.config.kappa.exp() * (self.s_pred - self.state.v * f.t_p);
        // A negative amplitude has no physical meaning; the predicted path is
        // simply too short to pose risk.
        lambda.max(0.0)
    }
}

/// Gaussian field of one vehicle evaluated at a query point.
pub fn field_value(query: Vec2, src: &FieldSource) -> Result<f64> {
    if !query.x.is_finite() || !query.y.is_finite() || !src.delta_f.is_finite() || !src.s_pred.is_finite() {
        return Err(Error::NonFinite("field_value input".into()));
    }
    let lambda = src.amplitude();
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let sigma = src.sigma();
    let ridge_dist = match turning_center(src.state, src.delta_f, src.config) {
        Some(center) => {
            let radius = src.config.wheelbase() / src.delta_f.tan().abs();
            (query.dist(center) - radius).abs()
        }
        None => {
            // Straight mode: perpendicular distance to the predicted straight
            // path through the rear axle.
            let (sin_phi, cos_phi) = src.state.yaw.sin_cos();
            let rear = Vec2::new(src.state.x - src.config.l_r * cos_phi, src.state.y - src.config.l_r * sin_phi);
            Vec2::new(cos_phi, sin_phi).cross(query.sub(rear)).abs()
        }
    };
    Ok(lambda * (-(ridge_dist * ridge_dist) / (2.0 * sigma * sigma)).exp())
}

/// One vehicle observing a shared conflict point.
#[derive(Debug, Clone, Copy)]
pub struct CpObserver<'a> {
    pub src: FieldSource<'a>,
    /// Remaining along-route distance from the vehicle to the conflict point
    /// [m]; negative once passed.
    pub dist_to_cp: f64,
}

/// Total potential at a conflict point: the sum over vehicles whose predicted
/// path reaches it. A vehicle whose prediction falls short of the conflict
/// point predicts no collision there and contributes nothing this step.
pub fn risk_at_cp(cp: Vec2, observers: &[CpObserver]) -> Result<f64> {
    let mut total = 0.0;
    for o in observers {
        if o.dist_to_cp <= o.src.s_pred {
            total += field_value(cp, &o.src)?;
        }
    }
    Ok(total)
}

/// Per-pair event-trigger state with deactivation hysteresis.
///
/// A game opens when the risk strictly exceeds the safe threshold and closes
/// only when it falls below `hysteresis * threshold`, preventing chatter at
/// the boundary.
#[derive(Debug, Clone, Copy, Default)]
pub struct TriggerState {
    active: bool,
}

impl TriggerState {
    pub fn update(&mut self, gamma_cp: f64, gamma_sf: f64, hysteresis: f64) -> bool {
        if self.active {
            if gamma_cp < hysteresis * gamma_sf {
                self.active = false;
            }
        } else if gamma_cp > gamma_sf {
            self.active = true;
        }
        self.active
    }

    pub fn is_active(&self) -> bool {
        self.active
    }
}
