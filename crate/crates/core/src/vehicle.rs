//! Kinematic bicycle model and fixed-step integration.
//!
//! State is `[v_x, phi, x, y]`: longitudinal speed, yaw angle and the global
//! position of the center of gravity. Control is `[a_x, delta_f]`:
//! longitudinal acceleration and front-wheel steering angle. The model is
//!
//! ```text
//! v_x' = a_x
//! phi' = v_x tan(beta) / l_r
//! x'   = v_x cos(phi + beta) / cos(beta)
//! y'   = v_x sin(phi + beta) / cos(beta)
//! ```
//!
//! with the sideslip angle `beta = arctan(l_r / (l_f + l_r) * tan(delta_f))`.
//! All motion rows scale with `v_x`, so zero speed freezes the pose, and
//! `cos(beta) > 0` is guaranteed by the steering domain restriction.

use std::f64::consts::FRAC_PI_2;

use crate::cost::CostWeights;
use crate::error::{Error, Result};
use crate::geom::wrap_angle;
use crate::risk::FieldParams;

/// Per-vehicle state: longitudinal speed, yaw and global position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    /// Longitudinal speed [m/s], never negative.
    pub v: f64,
    /// Yaw angle [rad], normalized to (-pi, pi].
    pub yaw: f64,
    pub x: f64,
    pub y: f64,
}

impl VehicleState {
    pub fn new(v: f64, yaw: f64, x: f64, y: f64) -> Self {
        VehicleState { v, yaw, x, y }
    }

    pub fn position(&self) -> crate::geom::Vec2 {
        crate::geom::Vec2::new(self.x, self.y)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.v, self.yaw, self.x, self.y]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        VehicleState { v: a[0], yaw: a[1], x: a[2], y: a[3] }
    }

    pub fn is_finite(&self) -> bool {
        self.v.is_finite() && self.yaw.is_finite() && self.x.is_finite() && self.y.is_finite()
    }
}

/// Control input: longitudinal acceleration and front-wheel steering angle.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlInput {
    pub a: f64,
    pub delta: f64,
}

impl ControlInput {
    pub fn new(a: f64, delta: f64) -> Self {
        ControlInput { a, delta }
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.delta.is_finite()
    }
}

/// Physical parameters, control bounds, aggressiveness and per-vehicle
/// potential-field / cost settings.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleConfig {
    /// Front wheel base [m].
    pub l_f: f64,
    /// Rear wheel base [m].
    pub l_r: f64,
    /// Vehicle width [m].
    pub width: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub delta_max: f64,
    /// Desired / maximum longitudinal speed [m/s].
    pub v_max: f64,
    /// Aggressiveness in [0, 1]; trades passing efficiency against safety.
    pub kappa: f64,
    pub field: FieldParams,
    pub weights: CostWeights,
}

impl Default for VehicleConfig {
    fn default() -> Self {
        VehicleConfig {
            l_f: 1.2,
            l_r: 1.6,
            width: 1.8,
            a_min: -4.0,
            a_max: 3.0,
            delta_max: 0.5,
            v_max: 10.0,
            kappa: 0.5,
            field: FieldParams::default(),
            weights: CostWeights::default(),
        }
    }
}

impl VehicleConfig {
    /// Total wheel base l_f + l_r.
    pub fn wheelbase(&self) -> f64 {
        self.l_f + self.l_r
    }

    pub fn clamp_control(&self, u: ControlInput) -> ControlInput {
        ControlInput {
            a: u.a.clamp(self.a_min, self.a_max),
            delta: u.delta.clamp(-self.delta_max, self.delta_max),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.l_f > 0.0
            && self.l_r > 0.0
            && self.width > 0.0
            && (0.0..=1.0).contains(&self.kappa)
            && self.v_max > 0.0
            && self.a_min < 0.0
            && self.a_max > 0.0
            && self.delta_max > 0.0
            && self.delta_max < FRAC_PI_2;
        if ok {
            Ok(())
        } else {
            Err(Error::Scenario(format!("invalid vehicle parameters: {self:?}")))
        }
    }
}

/// Sideslip angle `beta = arctan(l_r / (l_f + l_r) * tan(delta_f))`.
pub fn sideslip(delta_f: f64, l_f: f64, l_r: f64) -> Result<f64> {
    if !(delta_f.abs() < FRAC_PI_2) {
        return Err(Error::Domain(format!("|delta_f| = {} must be < pi/2", delta_f.abs())));
    }
    Ok((l_r / (l_f + l_r) * delta_f.tan()).atan())
}

/// State time-derivative `[v', phi', x', y']` of the bicycle model.
pub fn derivative(state: &VehicleState, control: &ControlInput, config: &VehicleConfig) -> Result<[f64; 4]> {
    let beta = sideslip(control.delta, config.l_f, config.l_r)?;
    Ok(derivative_raw(state.to_array(), control, config, beta))
}

#[inline]
fn derivative_raw(x: [f64; 4], u: &ControlInput, config: &VehicleConfig, beta: f64) -> [f64; 4] {
    let (v, yaw) = (x[0], x[1]);
    let heading = yaw + beta;
    let cos_b = beta.cos();
    [
        u.a,
        v * beta.tan() / config.l_r,
        v * heading.cos() / cos_b,
        v * heading.sin() / cos_b,
    ]
}

/// Jacobian of the derivative with respect to the state, d f / d [v, phi, x, y].
#[inline]
pub fn jacobian_state(x: [f64; 4], u: &ControlInput, config: &VehicleConfig, beta: f64) -> [[f64; 4]; 4] {
    let (v, yaw) = (x[0], x[1]);
    let heading = yaw + beta;
    let cos_b = beta.cos();
    let (sin_h, cos_h) = heading.sin_cos();
    let _ = u;
    [
        [0.0, 0.0, 0.0, 0.0],
        [beta.tan() / config.l_r, 0.0, 0.0, 0.0],
        [cos_h / cos_b, -v * sin_h / cos_b, 0.0, 0.0],
        [sin_h / cos_b, v * cos_h / cos_b, 0.0, 0.0],
    ]
}

/// Jacobian of the derivative with respect to the control, d f / d [a, delta].
#[inline]
pub fn jacobian_control(x: [f64; 4], u: &ControlInput, config: &VehicleConfig) -> [[f64; 2]; 4] {
    let (v, yaw) = (x[0], x[1]);
    let ratio = config.l_r / config.wheelbase();
    let tan_d = u.delta.tan();
    let sec2_d = 1.0 + tan_d * tan_d;
    // beta = atan(ratio * tan(delta))
    let inner = ratio * tan_d;
    let dbeta_ddelta = ratio * sec2_d / (1.0 + inner * inner);
    let beta = inner.atan();
    let heading = yaw + beta;
    let cos_b = beta.cos();
    let tan_b = beta.tan();
    let (sin_h, cos_h) = heading.sin_cos();
    let sec2_b = 1.0 + tan_b * tan_b;
    [
        [1.0, 0.0],
        [0.0, v * sec2_b / config.l_r * dbeta_ddelta],
        [0.0, v * dbeta_ddelta / cos_b * (cos_h * tan_b - sin_h)],
        [0.0, v * dbeta_ddelta / cos_b * (sin_h * tan_b + cos_h)],
    ]
}

/// One classical 4-stage Runge-Kutta step of length `dt` under a held control.
///
/// Speed is clamped at zero after the step (no reverse driving at the
/// intersection) and the yaw is renormalized into (-pi, pi].
pub fn step(state: &VehicleState, control: &ControlInput, dt: f64, config: &VehicleConfig) -> Result<VehicleState> {
    if !state.is_finite() || !control.is_finite() {
        return Err(Error::NonFinite(format!("step input: {state:?}, {control:?}")));
    }
    if dt <= 0.0 {
        return Err(Error::Domain(format!("dt = {dt} must be > 0")));
    }
    let beta = sideslip(control.delta, config.l_f, config.l_r)?;
    let x = rk4_raw(state.to_array(), control, dt, config, beta);
    let mut out = VehicleState::from_array(x);
    if out.v < 0.0 {
        out.v = 0.0;
    }
    out.yaw = wrap_angle(out.yaw);
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("step output from {state:?} under {control:?}")));
    }
    Ok(out)
}

/// Raw RK4 update without clamping or wrapping; used by the solver, which
/// applies its own clamp bookkeeping for the adjoint pass.
#[inline]
pub fn rk4_raw(x: [f64; 4], u: &ControlInput, dt: f64, config: &VehicleConfig, beta: f64) -> [f64; 4] {
    let add = |a: [f64; 4], b: [f64; 4], k: f64| {
        [a[0] + k * b[0], a[1] + k * b[1], a[2] + k * b[2], a[3] + k * b[3]]
    };
    let k1 = derivative_raw(x, u, config, beta);
    let k2 = derivative_raw(add(x, k1, dt / 2.0), u, config, beta);
    let k3 = derivative_raw(add(x, k2, dt / 2.0), u, config, beta);
    let k4 = derivative_raw(add(x, k3, dt), u, config, beta);
    let mut out = x;
    for i in 0..4 {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_4, PI};

    fn cfg() -> VehicleConfig {
        VehicleConfig::default()
    }

    #[test]
    fn sideslip_zero_and_odd() {
        assert_eq!(sideslip(0.0, 1.2, 1.6).unwrap(), 0.0);
        for d in [0.05, 0.2, 0.45] {
            let b = sideslip(d, 1.2, 1.6).unwrap();
            let bm = sideslip(-d, 1.2, 1.6).unwrap();
            assert!((b + bm).abs() < 1e-15, "odd symmetry at {d}");
        }
    }

    #[test]
    fn sideslip_reference_value() {
        // atan(1.6/2.8 * tan(0.2)), frozen from a 40-digit evaluation.
        let b = sideslip(0.2, 1.2, 1.6).unwrap();
        assert!((b - 0.11532036494119865).abs() < 1e-15);
    }

    #[test]
    fn sideslip_domain_error() {
        assert!(sideslip(FRAC_PI_2, 1.2, 1.6).is_err());
        assert!(sideslip(-1.6, 1.2, 1.6).is_err());
        assert!(sideslip(f64::NAN, 1.2, 1.6).is_err());
    }

    #[test]
    fn derivative_straight_motion() {
        let d = derivative(
            &VehicleState::new(5.0, 0.0, 0.0, 0.0),
            &ControlInput::new(0.0, 0.0),
            &cfg(),
        )
        .unwrap();
        assert_eq!(d, [0.0, 0.0, 5.0, 0.0]);
    }

    #[test]
    fn derivative_zero_speed_freezes_pose() {
        let d = derivative(
            &VehicleState::new(0.0, 1.1, 3.0, -2.0),
            &ControlInput::new(0.0, 0.4),
            &cfg(),
        )
        .unwrap();
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 0.0);
        assert_eq!(d[3], 0.0);
    }

    #[test]
    fn derivative_reference_value() {
        // v = 5, phi = pi/4, delta = 0.1, a = 1, l_f = l_r = 1.4.
        // Frozen from a 40-digit evaluation of the model equations.
        let config = VehicleConfig { l_f: 1.4, l_r: 1.4, ..cfg() };
        let d = derivative(
            &VehicleState::new(5.0, FRAC_PI_4, 0.0, 0.0),
            &ControlInput::new(1.0, 0.1),
            &config,
        )
        .unwrap();
        let expect = [1.0, 0.17916905729544740, 3.3581655883833609, 3.7129022234821143];
        for i in 0..4 {
            assert!((d[i] - expect[i]).abs() < 1e-13, "row {i}: {} vs {}", d[i], expect[i]);
        }
    }

    #[test]
    fn step_constant_velocity_exact() {
        let s = step(
            &VehicleState::new(5.0, 0.0, 0.0, 0.0),
            &ControlInput::new(0.0, 0.0),
            0.1,
            &cfg(),
        )
        .unwrap();
        assert!((s.x - 0.5).abs() < 1e-15);
        assert_eq!(s.v, 5.0);
        assert_eq!(s.y, 0.0);
        assert_eq!(s.yaw, 0.0);
    }

    #[test]
    fn step_uniform_acceleration_exact() {
        // 1-D uniformly accelerated motion is a polynomial of degree 2; RK4 is exact.
        let s = step(
            &VehicleState::new(5.0, 0.0, 0.0, 0.0),
            &ControlInput::new(1.0, 0.0),
            0.1,
            &cfg(),
        )
        .unwrap();
        assert!((s.v - 5.1).abs() < 1e-15);
        assert!((s.x - 0.505).abs() < 1e-14);
        assert_eq!(s.y, 0.0);
    }

    #[test]
    fn step_speed_never_negative() {
        let mut s = VehicleState::new(1.0, 0.0, 0.0, 0.0);
        let u = ControlInput::new(-4.0, 0.1);
        for _ in 0..30 {
            s = step(&s, &u, 0.1, &cfg()).unwrap();
            assert!(s.v >= 0.0);
        }
        assert_eq!(s.v, 0.0);
    }

    #[test]
    fn step_rejects_non_finite() {
        assert!(step(
            &VehicleState::new(f64::NAN, 0.0, 0.0, 0.0),
            &ControlInput::new(0.0, 0.0),
            0.1,
            &cfg()
        )
        .is_err());
        assert!(step(
            &VehicleState::new(5.0, 0.0, 0.0, 0.0),
            &ControlInput::new(f64::INFINITY, 0.0),
            0.1,
            &cfg()
        )
        .is_err());
    }

    /// Integrate a curved maneuver at a coarse step and compare the endpoint
    /// against a dt = 1e-4 reference of the same dynamics.
    fn endpoint_error(dt: f64) -> f64 {
        let config = cfg();
        let u = ControlInput::new(0.2, 0.1);
        let run = |dt: f64| {
            let mut s = VehicleState::new(5.0, 0.0, 0.0, 0.0);
            let n = (5.0 / dt).round() as usize;
            for _ in 0..n {
                s = step(&s, &u, dt, &config).unwrap();
            }
            s
        };
        let coarse = run(dt);
        let fine = run(1e-4);
        ((coarse.x - fine.x).powi(2) + (coarse.y - fine.y).powi(2)).sqrt()
    }

    #[test]
    fn step_fine_grid_oracle_curved() {
        // Curved case over 5 s at dt = 0.1 stays within 1 cm of the fine-step reference.
        assert!(endpoint_error(0.1) < 0.01);
    }

    #[test]
    fn step_fourth_order_convergence() {
        // Halving dt should cut the endpoint error by at least 8x on a smooth profile.
        let e1 = endpoint_error(0.2);
        let e2 = endpoint_error(0.1);
        assert!(e1 > 0.0 && e2 > 0.0);
        assert!(e1 / e2 >= 8.0, "order check: {e1:.3e} / {e2:.3e} = {:.2}", e1 / e2);
    }

    #[test]
    fn step_rotational_equivariance() {
        let config = cfg();
        let u = ControlInput::new(0.5, 0.12);
        let base = VehicleState::new(4.0, 0.3, 1.0, 2.0);
        let plain = step(&base, &u, 0.1, &config).unwrap();
        for theta in [0.7f64, -1.3, 2.9] {
            let (s, c) = theta.sin_cos();
            let rotated = VehicleState::new(
                base.v,
                wrap_angle(base.yaw + theta),
                c * base.x - s * base.y,
                s * base.x + c * base.y,
            );
            let out = step(&rotated, &u, 0.1, &config).unwrap();
            let back_x = c * out.x + s * out.y;
            let back_y = -s * out.x + c * out.y;
            assert!((back_x - plain.x).abs() < 1e-9);
            assert!((back_y - plain.y).abs() < 1e-9);
            assert!(crate::geom::angle_diff(out.yaw, plain.yaw + theta).abs() < 1e-9);
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let config = VehicleConfig { l_f: 1.3, l_r: 1.5, ..cfg() };
        let x = [4.2, 0.7, 3.0, -1.0];
        let u = ControlInput::new(0.8, 0.17);
        let beta = sideslip(u.delta, config.l_f, config.l_r).unwrap();
        let jx = jacobian_state(x, &u, &config, beta);
        let ju = jacobian_control(x, &u, &config);
        let h = 1e-6;
        for col in 0..4 {
            let mut xp = x;
            let mut xm = x;
            xp[col] += h;
            xm[col] -= h;
            let fp = derivative(&VehicleState::from_array(xp), &u, &config).unwrap();
            let fm = derivative(&VehicleState::from_array(xm), &u, &config).unwrap();
            for row in 0..4 {
                let fd = (fp[row] - fm[row]) / (2.0 * h);
                assert!((jx[row][col] - fd).abs() < 1e-6, "jx[{row}][{col}]");
            }
        }
        for (col, bump) in [(0usize, 1e-6), (1usize, 1e-6)] {
            let mut up = u;
            let mut um = u;
            if col == 0 {
                up.a += bump;
                um.a -= bump;
            } else {
                up.delta += bump;
                um.delta -= bump;
            }
            let fp = derivative(&VehicleState::from_array(x), &up, &config).unwrap();
            let fm = derivative(&VehicleState::from_array(x), &um, &config).unwrap();
            for row in 0..4 {
                let fd = (fp[row] - fm[row]) / (2.0 * bump);
                assert!((ju[row][col] - fd).abs() < 1e-5, "ju[{row}][{col}]");
            }
        }
    }

    #[test]
    fn yaw_wraps_into_range() {
        let config = cfg();
        let mut s = VehicleState::new(6.0, 3.0, 0.0, 0.0);
        let u = ControlInput::new(0.0, 0.3);
        for _ in 0..200 {
            s = step(&s, &u, 0.1, &config).unwrap();
            assert!(s.yaw > -PI && s.yaw <= PI);
        }
    }
}
