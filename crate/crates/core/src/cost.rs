//! Running cost and payoff construction.
//!
//! The per-vehicle running cost is an aggressiveness-weighted blend of a
//! safety cost and a passing-efficiency cost:
//!
//! ```text
//! J = (1 - kappa) * J_s + kappa * J_e
//! J_s = k_s_log * J_s_log + k_s_lat * sum(J_s_lat) + k_s_lk * J_s_lk
//! ```
//!
//! The longitudinal term penalizes a small time-to-collision against the
//! leading vehicle, the lateral term penalizes near-simultaneous arrival at a
//! shared conflict point, lane keeping penalizes offset and heading error
//! against the route, and efficiency penalizes deviation from the speed cap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights of the running-cost terms. `eps_reg` regularizes the reciprocal
/// time-to-collision terms and must stay positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostWeights {
    pub k_s_log: f64,
    pub k_s_lat: f64,
    pub k_s_lk: f64,
    pub k_y_lk: f64,
    pub k_phi_lk: f64,
    pub k_e: f64,
    pub eps_reg: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            k_s_log: 1.0,
            k_s_lat: 3.0,
            k_s_lk: 1.0,
            k_y_lk: 1.0,
            k_phi_lk: 2.0,
            k_e: 0.12,
            eps_reg: 0.01,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.k_s_log >= 0.0
            && self.k_s_lat >= 0.0
            && self.k_s_lk >= 0.0
            && self.k_y_lk >= 0.0
            && self.k_phi_lk >= 0.0
            && self.k_e >= 0.0
            && self.eps_reg > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Scenario(format!("invalid cost weights: {self:?}")))
        }
    }
}

/// Itemized running cost of one vehicle at one instant, with the TTC
/// diagnostics that produced the safety terms.
#[derive(Debug, Clone, Copy, Default)]
pub struct CostBreakdown {
    pub j_s_log: f64,
    pub j_s_lat: f64,
    pub j_s_lk: f64,
    pub j_s: f64,
    pub j_e: f64,
    pub j_total: f64,
    /// Longitudinal TTC against the leading vehicle [s]; infinite when receding or no LV.
    pub ttc_log: f64,
    /// Signed lateral TTC of the closest conflict pair [s]; infinite when none active.
    pub ttc_lat: f64,
}

/// Longitudinal safety term against the leading vehicle.
///
/// Returns `(J_s_log, TTC_log)`. The cost is active only while closing in
/// (`v_host > v_lv`); otherwise it is zero with an infinite TTC.
pub fn longitudinal_safety(v_host: f64, v_lv: f64, gap: f64, eps_reg: f64) -> Result<(f64, f64)> {
    if gap <= 0.0 {
        return Err(Error::Overlap { gap });
    }
    let dv = v_host - v_lv;
    if dv > 0.0 {
        let ttc = gap / dv;
        Ok((1.0 / (ttc * ttc + eps_reg), ttc))
    } else {
        Ok((0.0, f64::INFINITY))
    }
}

/// Lateral safety term for one conflict pair.
///
/// `dist_host` and `dist_nv` are the remaining route arc lengths to the shared
/// conflict point. A stationary vehicle never reaches the conflict point, so a
/// zero speed yields an infinite time-to-conflict-point and a zero cost.
/// Returns `(J_s_lat, TTC_lat)` where the TTC keeps its sign (host later than
/// the neighbour is positive) and enters the cost squared.
pub fn lateral_safety(dist_host: f64, v_host: f64, dist_nv: f64, v_nv: f64, eps_reg: f64) -> (f64, f64) {
    let tcp_host = time_to_conflict_point(dist_host, v_host);
    let tcp_nv = time_to_conflict_point(dist_nv, v_nv);
    if !tcp_host.is_finite() || !tcp_nv.is_finite() {
        return (0.0, f64::INFINITY);
    }
    let ttc = tcp_host - tcp_nv;
    (1.0 / (ttc * ttc + eps_reg), ttc)
}

/// Time to reach a conflict point `dist` metres ahead at speed `v`;
/// infinite for a stationary vehicle.
pub fn time_to_conflict_point(dist: f64, v: f64) -> f64 {
    if v > 0.0 {
        dist / v
    } else {
        f64::INFINITY
    }
}

/// Lane-keeping term from the signed lateral offset and heading error.
pub fn lane_keeping(lateral_offset: f64, heading_error: f64, w: &CostWeights) -> f64 {
    w.k_y_lk * lateral_offset * lateral_offset + w.k_phi_lk * heading_error * heading_error
}

/// Passing-efficiency term `k_e (v - v_max)^2`.
pub fn efficiency(v: f64, v_max: f64, k_e: f64) -> f64 {
    let dv = v - v_max;
    k_e * dv * dv
}

/// Blend the safety and efficiency aggregates with the aggressiveness.
pub fn blend(j_s: f64, j_e: f64, kappa: f64) -> f64 {
    (1.0 - kappa) * j_s + kappa * j_e
}

/// Inputs for one lateral (cross / confluence) conflict term of a host.
#[derive(Debug, Clone, Copy)]
pub struct LateralTerm {
    /// Remaining arc length from the host to the conflict point [m].
    pub dist_host: f64,
    /// Remaining arc length from the neighbour to the conflict point [m].
    pub dist_nv: f64,
    pub v_nv: f64,
    /// Whether the pairwise game for this conflict is triggered this step.
    /// Untriggered conflicts contribute nothing (their lateral weight is zeroed).
    pub enabled: bool,
}

/// Inputs for the longitudinal term of a host.
#[derive(Debug, Clone, Copy)]
pub struct LongitudinalTerm {
    pub gap: f64,
    pub v_lv: f64,
}

/// Assemble the full running cost of one host from precomputed term inputs.
///
/// Lateral terms whose conflict point either vehicle has already passed must
/// be filtered out by the caller (they carry a negative remaining distance);
/// this function drops them defensively as well.
pub fn running_cost(
    v_host: f64,
    lateral_offset: f64,
    heading_error: f64,
    lv: Option<LongitudinalTerm>,
    laterals: &[LateralTerm],
    v_max: f64,
    kappa: f64,
    w: &CostWeights,
) -> Result<CostBreakdown> {
    let mut out = CostBreakdown {
        ttc_log: f64::INFINITY,
        ttc_lat: f64::INFINITY,
        ..CostBreakdown::default()
    };
    if let Some(lv) = lv {
        let (j, ttc) = longitudinal_safety(v_host, lv.v_lv, lv.gap, w.eps_reg)?;
        out.j_s_log = j;
        out.ttc_log = ttc;
    }
    for lt in laterals {
        if !lt.enabled || lt.dist_host < 0.0 || lt.dist_nv < 0.0 {
            continue;
        }
        let (j, ttc) = lateral_safety(lt.dist_host, v_host, lt.dist_nv, lt.v_nv, w.eps_reg);
        out.j_s_lat += j;
        if ttc.abs() < out.ttc_lat.abs() {
            out.ttc_lat = ttc;
        }
    }
    out.j_s_lk = lane_keeping(lateral_offset, heading_error, w);
    out.j_s = w.k_s_log * out.j_s_log + w.k_s_lat * out.j_s_lat + w.k_s_lk * out.j_s_lk;
    out.j_e = efficiency(v_host, v_max, w.k_e);
    out.j_total = blend(out.j_s, out.j_e, kappa);
    Ok(out)
}

/// Payoff of a discretized trajectory: `P = phi_T - sum_k J(t_k) * dt`,
/// a left-endpoint rectangle rule over the decision grid. The terminal payoff
/// is a constant and defaults to zero.
pub fn payoff(running_costs: &[f64], dt: f64, terminal: f64) -> f64 {
    terminal - running_costs.iter().sum::<f64>() * dt
}
