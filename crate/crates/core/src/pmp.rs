//! Costate-based optimality certificates.
//!
//! For a candidate optimal trajectory the adjoint (costate) row vector obeys
//!
//! ```text
//! xi'(t) = -xi(t) df/dx + dJ/dx,      xi(T) = 0
//! ```
//!
//! (the terminal payoff is a constant, so its gradient vanishes), and along
//! an optimal interior arc the Hamiltonian gradient `xi df/du - dJ/du` is
//! zero. The functions here integrate the costate backwards along a given
//! trajectory and report that gradient as a residual: near zero for a
//! converged solution, large for a perturbed one. Saturated control
//! components satisfy the maximum principle at the boundary instead, so they
//! are excluded from the check.
//!
//! This is a diagnostic certificate, not a solver: the game module's
//! solutions are checked post hoc, and a scalar linear-quadratic problem with
//! a closed-form optimum validates the machinery itself.

use crate::error::Result;
use crate::game::{payoff_gradient, GameProblem};
use crate::vehicle::ControlInput;

/// Control problem interface for the costate integration. Dimensions are
/// dynamic; diagnostics do not need fixed-size arithmetic.
pub trait OcpModel {
    fn dim_x(&self) -> usize;
    fn dim_u(&self) -> usize;
    fn dynamics(&self, t: f64, x: &[f64], u: &[f64]) -> Vec<f64>;
    /// d f_i / d x_j, row i, column j.
    fn jac_x(&self, t: f64, x: &[f64], u: &[f64]) -> Vec<Vec<f64>>;
    fn jac_u(&self, t: f64, x: &[f64], u: &[f64]) -> Vec<Vec<f64>>;
    fn cost_grad_x(&self, t: f64, x: &[f64], u: &[f64]) -> Vec<f64>;
    fn cost_grad_u(&self, t: f64, x: &[f64], u: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone)]
pub struct CostateDiagnostics {
    /// |xi df/du - dJ/du| per node and unsaturated control component.
    pub residuals: Vec<Vec<f64>>,
    pub max_residual: f64,
}

/// Integrate the costate backwards along `(ts, xs, us)` and report the
/// Hamiltonian-gradient residual at each node. `us` has one entry per
/// interval (`ts.len() - 1`); `saturated[k][c]` marks components pinned at a
/// control bound, which are skipped.
pub fn costate_residual<M: OcpModel>(
    model: &M,
    ts: &[f64],
    xs: &[Vec<f64>],
    us: &[Vec<f64>],
    saturated: &[Vec<bool>],
) -> CostateDiagnostics {
    let nx = model.dim_x();
    let nu = model.dim_u();
    assert_eq!(xs.len(), ts.len());
    assert_eq!(us.len() + 1, ts.len());

    let mut xi = vec![0.0f64; nx];
    let mut residuals = vec![Vec::new(); us.len()];
    let mut max_residual = 0.0f64;

    // xi' = -xi Jx + Jc; integrate each interval backwards with RK4, holding
    // the control and interpolating the state linearly between nodes.
    for k in (0..us.len()).rev() {
        let (t0, t1) = (ts[k], ts[k + 1]);
        let h = t1 - t0;
        let x_at = |t: f64| -> Vec<f64> {
            let w = ((t - t0) / h).clamp(0.0, 1.0);
            (0..nx).map(|i| xs[k][i] * (1.0 - w) + xs[k + 1][i] * w).collect()
        };
        let rhs = |t: f64, xi: &[f64]| -> Vec<f64> {
            let x = x_at(t);
            let jx = model.jac_x(t, &x, &us[k]);
            let jc = model.cost_grad_x(t, &x, &us[k]);
            (0..nx)
                .map(|j| {
                    let mut v = jc[j];
                    for (i, row) in jx.iter().enumerate() {
                        v -= xi[i] * row[j];
                    }
                    v
                })
                .collect()
        };
        // One backward RK4 step from t1 to t0.
        let hb = -h;
        let k1 = rhs(t1, &xi);
        let mid1: Vec<f64> = (0..nx).map(|i| xi[i] + 0.5 * hb * k1[i]).collect();
        let k2 = rhs(t1 + 0.5 * hb, &mid1);
        let mid2: Vec<f64> = (0..nx).map(|i| xi[i] + 0.5 * hb * k2[i]).collect();
        let k3 = rhs(t1 + 0.5 * hb, &mid2);
        let end: Vec<f64> = (0..nx).map(|i| xi[i] + hb * k3[i]).collect();
        let k4 = rhs(t0, &end);
        for i in 0..nx {
            xi[i] += hb / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }

        // Stationarity at the left node of the interval.
        let ju = model.jac_u(t0, &xs[k], &us[k]);
        let jcu = model.cost_grad_u(t0, &xs[k], &us[k]);
        let mut row = Vec::with_capacity(nu);
        for c in 0..nu {
            if saturated[k][c] {
                row.push(0.0);
                continue;
            }
            let mut hu = -jcu[c];
            for i in 0..nx {
                hu += xi[i] * ju[i][c];
            }
            row.push(hu.abs());
            max_residual = max_residual.max(hu.abs());
        }
        residuals[k] = row;
    }

    CostateDiagnostics { residuals, max_residual }
}

/// Stationarity certificate for one player of a solved game.
///
/// The player's dynamics are its own bicycle model and the running cost sees
/// the opponents through their (fixed) equilibrium trajectories, so the
/// relevant costate block is the player's own. Because that is exactly the
/// discrete adjoint the solver uses, the residual reported here is the payoff
/// gradient at the solution, projected onto unsaturated components — the
/// interior stationarity of the maximum principle on the decision grid.
pub fn pmp_costate_residual(
    problem: &GameProblem,
    controls: &[Vec<ControlInput>],
) -> Result<Vec<CostateDiagnostics>> {
    let mut out = Vec::with_capacity(problem.players.len());
    for (i, player) in problem.players.iter().enumerate() {
        let (_, grad) = payoff_gradient(problem, i, controls)?;
        let cfg = player.config;
        let bound_eps = 1e-9;
        let mut residuals = Vec::with_capacity(grad.len());
        let mut max_residual = 0.0f64;
        for (k, g) in grad.iter().enumerate() {
            let u = controls[i][k];
            let mut row = Vec::with_capacity(2);
            let sat_a = (u.a - cfg.a_min).abs() < bound_eps || (cfg.a_max - u.a).abs() < bound_eps;
            let sat_d =
                (u.delta + cfg.delta_max).abs() < bound_eps || (cfg.delta_max - u.delta).abs() < bound_eps;
            for (c, sat) in [(0usize, sat_a), (1usize, sat_d)] {
                if sat {
                    row.push(0.0);
                } else {
                    row.push(g[c].abs());
                    max_residual = max_residual.max(g[c].abs());
                }
            }
            residuals.push(row);
        }
        out.push(CostateDiagnostics { residuals, max_residual });
    }
    Ok(out)
}
