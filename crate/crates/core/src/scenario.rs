//! Intersection geometry, vehicle routes, conflict classification and
//! interaction roles.
//!
//! Routes are precomputed fixed paths: a straight approach on the entry lane
//! centerline, a circular fillet through the conflict zone, and a straight
//! exit. The decision layer optimizes speed and small steering corrections
//! about the route, so route geometry never changes during a run.
//!
//! Conflicts between two routes fall into three kinds:
//! * following — both routes start on the same entry lane;
//! * cross     — the routes intersect at a significant angle;
//! * confluence — the routes end on the same exit lane.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geom::{angle_diff, line_intersection, project_on_segment, Vec2};
use crate::vehicle::VehicleState;

/// Densification step for route polylines and conflict sweeps [m].
pub const ROUTE_STEP: f64 = 0.1;
/// Tangent-angle difference above which an intersection counts as a cross conflict.
pub const CROSS_ANGLE_THRESHOLD: f64 = 15.0 * PI / 180.0;
/// Distance below which two route points are considered joined (merged
/// lanes). Merges are tangential, so a loose tolerance would smear the merge
/// point backwards along the approach.
const JOIN_TOL: f64 = 1e-4;

/// Intersection layout: radial arms around a square conflict zone (CZ).
#[derive(Debug, Clone, PartialEq)]
pub struct IntersectionGeometry {
    pub arm_count: usize,
    pub lanes_per_arm: usize,
    /// Lane width [m].
    pub lane_width: f64,
    /// Half the side length of the square conflict zone [m].
    pub cz_half_extent: f64,
    /// Length of the straight approach / exit kept on each arm [m].
    pub approach_length: f64,
    /// Heading of each arm, pointing away from the intersection center [rad].
    pub arm_headings: Vec<f64>,
    /// Smallest fillet radius used for turns [m]; keeps steering demand
    /// within the front-wheel angle bound.
    pub min_turn_radius: f64,
}

impl IntersectionGeometry {
    /// Evenly spaced arms starting east, counter-clockwise.
    pub fn radial(arm_count: usize, lanes_per_arm: usize, lane_width: f64, cz_half_extent: f64) -> Self {
        let arm_headings = (0..arm_count)
            .map(|i| crate::geom::wrap_angle(2.0 * PI * i as f64 / arm_count as f64))
            .collect();
        IntersectionGeometry {
            arm_count,
            lanes_per_arm,
            lane_width,
            cz_half_extent,
            approach_length: 80.0,
            arm_headings,
            min_turn_radius: 6.0,
        }
    }

    /// Standard four-arm crossing (east, north, west, south), three lanes per
    /// direction, 4 m lanes, 12 m conflict-zone half extent.
    pub fn cross() -> Self {
        Self::radial(4, 3, 4.0, 12.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.arm_count < 1
            || self.lanes_per_arm < 1
            || self.lane_width <= 0.0
            || self.cz_half_extent <= 0.0
            || self.approach_length <= 0.0
            || self.arm_headings.len() != self.arm_count
        {
            return Err(Error::Scenario(format!("invalid intersection geometry: {self:?}")));
        }
        Ok(())
    }

    pub fn arm_direction(&self, arm: usize) -> Vec2 {
        Vec2::from_angle(self.arm_headings[arm])
    }

    /// True when the point lies inside the conflict zone.
    pub fn in_conflict_zone(&self, p: Vec2) -> bool {
        p.x.abs() <= self.cz_half_extent && p.y.abs() <= self.cz_half_extent
    }

    /// Centerline of an entry lane as (point, travel direction). Lane 0 is the
    /// innermost lane; traffic keeps to the right of the arm axis.
    pub fn entry_lane_line(&self, lane: LaneRef) -> (Vec2, Vec2) {
        let dir = self.arm_direction(lane.arm);
        let travel = dir.scale(-1.0);
        let offset = travel.perp_right().scale((0.5 + lane.lane as f64) * self.lane_width);
        let far = dir.scale(self.cz_half_extent + self.approach_length).add(offset);
        (far, travel)
    }

    /// Centerline of an exit lane as (point, travel direction).
    pub fn exit_lane_line(&self, lane: LaneRef) -> (Vec2, Vec2) {
        let dir = self.arm_direction(lane.arm);
        let travel = dir;
        let offset = travel.perp_right().scale((0.5 + lane.lane as f64) * self.lane_width);
        let end = dir.scale(self.cz_half_extent + self.approach_length).add(offset);
        (end, travel)
    }
}

/// A lane on one arm; lane 0 is the innermost (closest to the arm axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LaneRef {
    pub arm: usize,
    pub lane: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Maneuver {
    Straight,
    Left,
    Right,
}

/// Position-based zone of a vehicle relative to the conflict zone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Zone {
    /// Ready vehicle: approaching, still outside the CZ.
    Rv,
    /// Passing vehicle: inside the CZ.
    Pv,
    /// Outside vehicle: past the CZ on its exit arm; excluded from games.
    Ov,
}

impl Zone {
    pub fn as_str(&self) -> &'static str {
        match self {
            Zone::Rv => "RV",
            Zone::Pv => "PV",
            Zone::Ov => "OV",
        }
    }
}

/// Result of projecting a position onto a route.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    /// Arc length along the route [m]; may exceed the route length (the final
    /// segment extends virtually) or go slightly negative before the start.
    pub s: f64,
    /// Signed lateral offset [m], positive to the left of the tangent.
    pub lateral: f64,
    /// Index of the winning segment.
    pub seg: usize,
    /// Route tangent angle at the projection [rad].
    pub tangent: f64,
    pub point: Vec2,
}

/// A fixed geometric path through the intersection, densified to a polyline
/// with strictly increasing arc length.
#[derive(Debug, Clone)]
pub struct Route {
    pub pts: Vec<Vec2>,
    /// Cumulative arc length per point; `cum[0] == 0`.
    pub cum: Vec<f64>,
    pub entry: LaneRef,
    pub exit: LaneRef,
    pub maneuver: Maneuver,
    pub lane_width: f64,
    /// Arc length at which the route enters the conflict zone.
    pub cz_enter_s: f64,
    /// Arc length at which the route leaves the conflict zone.
    pub cz_exit_s: f64,
}

impl Route {
    /// Build the route for one entry/exit lane pair: entry straight, circular
    /// fillet tangent to both lane centerlines, exit straight.
    pub fn build(geometry: &IntersectionGeometry, entry: LaneRef, exit: LaneRef) -> Result<Self> {
        geometry.validate()?;
        if entry.arm >= geometry.arm_count
            || exit.arm >= geometry.arm_count
            || entry.lane >= geometry.lanes_per_arm
            || exit.lane >= geometry.lanes_per_arm
        {
            return Err(Error::Scenario(format!("lane reference out of range: {entry:?} -> {exit:?}")));
        }
        let (p_far, u) = geometry.entry_lane_line(entry);
        let (p_end, w) = geometry.exit_lane_line(exit);

        let turn = u.cross(w);
        let dot = u.dot(w);
        let mut raw: Vec<Vec2> = Vec::new();
        let maneuver;
        if turn.abs() < 1e-9 && dot > 0.0 {
            // Straight through; entry and exit centerlines must be collinear.
            let off = p_end.sub(p_far);
            if off.cross(u).abs() > 1e-6 {
                return Err(Error::Scenario(
                    "straight route with laterally offset exit lane (lane changes are out of scope)".into(),
                ));
            }
            maneuver = Maneuver::Straight;
            sample_line(&mut raw, p_far, p_end);
        } else if turn.abs() < 1e-9 {
            return Err(Error::Scenario("u-turn routes are not supported".into()));
        } else {
            maneuver = if turn > 0.0 { Maneuver::Left } else { Maneuver::Right };
            let corner = line_intersection(p_far, u, p_end, w)
                .ok_or_else(|| Error::Scenario("entry and exit lanes do not meet".into()))?;
            // Distance from the corner back to where each centerline crosses
            // the CZ boundary; the fillet is sized so its tangent points stay
            // inside the zone where possible.
            let d_entry = boundary_distance(geometry, corner, u.scale(-1.0))?;
            let d_exit = boundary_distance(geometry, corner, w)?;
            let gamma = dot.clamp(-1.0, 1.0).acos();
            let half_tan = (gamma / 2.0).tan();
            let mut radius = d_entry.min(d_exit) / half_tan;
            radius = radius.max(geometry.min_turn_radius);
            let tangent_len = radius * half_tan;
            let t1 = corner.sub(u.scale(tangent_len));
            let t2 = corner.add(w.scale(tangent_len));
            let normal = if turn > 0.0 { u.perp_left() } else { u.perp_right() };
            let center = t1.add(normal.scale(radius));
            sample_line(&mut raw, p_far, t1);
            sample_arc(&mut raw, center, radius, t1, t2, turn > 0.0);
            sample_line(&mut raw, t2, p_end);
        }

        let mut pts: Vec<Vec2> = Vec::with_capacity(raw.len());
        for p in raw {
            if pts.last().map_or(true, |q: &Vec2| q.dist(p) > 1e-9) {
                pts.push(p);
            }
        }
        if pts.len() < 2 {
            return Err(Error::InvalidRoute("route has fewer than two waypoints".into()));
        }
        let mut cum = Vec::with_capacity(pts.len());
        cum.push(0.0);
        for i in 1..pts.len() {
            cum.push(cum[i - 1] + pts[i].dist(pts[i - 1]));
        }

        let mut cz_enter_s = f64::INFINITY;
        let mut cz_exit_s = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            if geometry.in_conflict_zone(*p) {
                cz_enter_s = cz_enter_s.min(cum[i]);
                cz_exit_s = cz_exit_s.max(cum[i]);
            }
        }
        if !cz_enter_s.is_finite() {
            return Err(Error::Scenario("route never enters the conflict zone".into()));
        }

        Ok(Route {
            pts,
            cum,
            entry,
            exit,
            maneuver,
            lane_width: geometry.lane_width,
            cz_enter_s,
            cz_exit_s,
        })
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Point at arc length `s`; extrapolates along the end tangents outside
    /// the stored range.
    pub fn point_at(&self, s: f64) -> Vec2 {
        if s <= 0.0 {
            let t = self.segment_dir(0);
            return self.pts[0].add(t.scale(s));
        }
        if s >= self.length() {
            let t = self.segment_dir(self.pts.len() - 2);
            return (*self.pts.last().unwrap()).add(t.scale(s - self.length()));
        }
        let i = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let seg_len = self.cum[i + 1] - self.cum[i];
        let t = (s - self.cum[i]) / seg_len;
        self.pts[i].add(self.pts[i + 1].sub(self.pts[i]).scale(t))
    }

    /// Route tangent angle at arc length `s`.
    pub fn tangent_at(&self, s: f64) -> f64 {
        let i = if s <= 0.0 {
            0
        } else if s >= self.length() {
            self.pts.len() - 2
        } else {
            match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
                Ok(i) => i.min(self.pts.len() - 2),
                Err(i) => i - 1,
            }
        };
        self.segment_dir(i).angle()
    }

    fn segment_dir(&self, i: usize) -> Vec2 {
        self.pts[i + 1].sub(self.pts[i]).normalized()
    }

    /// Project a position onto the route. `hint` narrows the segment search to
    /// a window around a previous projection; the full route is scanned when
    /// the hinted window looks unreliable.
    pub fn project(&self, pos: Vec2, hint: Option<usize>) -> Projection {
        match hint {
            Some(h) => {
                let lo = h.saturating_sub(10);
                let hi = (h + 120).min(self.pts.len() - 1);
                let p = self.project_range(pos, lo, hi);
                // A winner pinned to the window edge may be a local artefact.
                if (p.seg <= lo && lo > 0) || (p.seg >= hi - 1 && hi < self.pts.len() - 1) {
                    self.project_range(pos, 0, self.pts.len() - 1)
                } else {
                    p
                }
            }
            None => self.project_range(pos, 0, self.pts.len() - 1),
        }
    }

    fn project_range(&self, pos: Vec2, lo: usize, hi: usize) -> Projection {
        let last_seg = self.pts.len() - 2;
        let mut best = (f64::INFINITY, lo);
        let mut best_pt = self.pts[lo];
        let mut best_t = 0.0;
        for i in lo..hi {
            let a = self.pts[i];
            let b = self.pts[i + 1];
            let (mut p, mut t) = project_on_segment(pos, a, b);
            // The first and last segments extend virtually so vehicles
            // slightly before the start or past the end still project.
            if (i == 0 && t == 0.0) || (i == last_seg && t == 1.0) {
                let ab = b.sub(a);
                let len2 = ab.dot(ab);
                t = pos.sub(a).dot(ab) / len2;
                p = a.add(ab.scale(t));
            }
            let d = pos.dist(p);
            if d < best.0 {
                best = (d, i);
                best_pt = p;
                best_t = t;
            }
        }
        let i = best.1;
        let seg_len = self.cum[i + 1] - self.cum[i];
        let dir = self.segment_dir(i);
        let lateral = dir.cross(pos.sub(best_pt)).signum() * best.0;
        Projection {
            s: self.cum[i] + best_t * seg_len,
            lateral: if best.0 == 0.0 { 0.0 } else { lateral },
            seg: i,
            tangent: dir.angle(),
            point: best_pt,
        }
    }
}

fn sample_line(out: &mut Vec<Vec2>, a: Vec2, b: Vec2) {
    let len = a.dist(b);
    let n = (len / ROUTE_STEP).ceil().max(1.0) as usize;
    for i in 0..=n {
        out.push(a.add(b.sub(a).scale(i as f64 / n as f64)));
    }
}

fn sample_arc(out: &mut Vec<Vec2>, center: Vec2, radius: f64, from: Vec2, to: Vec2, ccw: bool) {
    let a0 = from.sub(center).angle();
    let mut a1 = to.sub(center).angle();
    if ccw {
        while a1 <= a0 {
            a1 += 2.0 * PI;
        }
    } else {
        while a1 >= a0 {
            a1 -= 2.0 * PI;
        }
    }
    let sweep = a1 - a0;
    let n = ((sweep.abs() * radius) / ROUTE_STEP).ceil().max(2.0) as usize;
    for i in 0..=n {
        let a = a0 + sweep * i as f64 / n as f64;
        out.push(center.add(Vec2::from_angle(a).scale(radius)));
    }
}

/// Distance from `from` along `dir` to the conflict-zone boundary.
fn boundary_distance(geometry: &IntersectionGeometry, from: Vec2, dir: Vec2) -> Result<f64> {
    let h = geometry.cz_half_extent;
    let mut best = f64::INFINITY;
    for (p0, n) in [
        (Vec2::new(h, 0.0), Vec2::new(1.0, 0.0)),
        (Vec2::new(-h, 0.0), Vec2::new(-1.0, 0.0)),
        (Vec2::new(0.0, h), Vec2::new(0.0, 1.0)),
        (Vec2::new(0.0, -h), Vec2::new(0.0, -1.0)),
    ] {
        let denom = dir.dot(n);
        if denom.abs() < 1e-12 {
            continue;
        }
        let t = p0.sub(from).dot(n) / denom;
        if t > 0.0 {
            let hit = from.add(dir.scale(t));
            let other = hit.sub(p0.scale(1.0)).sub(n.scale(hit.sub(p0).dot(n)));
            if other.norm() <= h + 1e-9 {
                best = best.min(t);
            }
        }
    }
    if best.is_finite() {
        Ok(best)
    } else {
        Err(Error::Scenario("lane centerline never crosses the conflict-zone boundary".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConflictType {
    Following,
    Cross,
    Confluence,
}

impl ConflictType {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConflictType::Following => "following",
            ConflictType::Cross => "cross",
            ConflictType::Confluence => "confluence",
        }
    }
}

/// A detected conflict between two routes.
#[derive(Debug, Clone, Copy)]
pub struct ConflictPoint {
    pub position: Vec2,
    pub conflict_type: ConflictType,
    /// Arc length of the conflict point along the first route [m].
    pub s_i: f64,
    /// Arc length of the conflict point along the second route [m].
    pub s_j: f64,
}

impl ConflictPoint {
    pub fn swapped(&self) -> ConflictPoint {
        ConflictPoint { s_i: self.s_j, s_j: self.s_i, ..*self }
    }
}

/// Classify the conflict between two routes, if any.
///
/// * Routes starting on the same entry lane are a following conflict; the
///   reported position is where the paths diverge (the route end when they
///   are identical). The live gap point is tracked per step by the engine.
/// * Routes ending on the same exit lane are a confluence conflict at the
///   merge point.
/// * Otherwise, an intersection with a tangent-angle difference above 15
///   degrees is a cross conflict.
///
/// Returns `None` when the routes never come within half a lane width, or
/// when they touch at a shallow angle with distinct exits (no taxonomy
/// bucket for that case).
pub fn classify_conflict(route_i: &Route, route_j: &Route) -> Result<Option<ConflictPoint>> {
    for r in [route_i, route_j] {
        if r.pts.len() < 2 {
            return Err(Error::InvalidRoute("route has fewer than two waypoints".into()));
        }
    }

    if route_i.entry == route_j.entry {
        // Shared approach lane: following. Find where the paths diverge.
        let mut last_joined: Option<usize> = None;
        let mut hint = 0usize;
        for (idx, p) in route_i.pts.iter().enumerate() {
            let proj = route_j.project(*p, Some(hint));
            hint = proj.seg;
            if proj.lateral.abs() < JOIN_TOL && proj.s > -0.5 && proj.s < route_j.length() + 0.5 {
                last_joined = Some(idx);
            } else if last_joined.is_some() {
                break;
            }
        }
        let idx = last_joined
            .ok_or_else(|| Error::InvalidRoute("routes share an entry lane but never coincide".into()))?;
        let position = route_i.pts[idx];
        let s_j = route_j.project(position, None).s;
        return Ok(Some(ConflictPoint {
            position,
            conflict_type: ConflictType::Following,
            s_i: route_i.cum[idx],
            s_j,
        }));
    }

    if route_i.exit == route_j.exit {
        // Shared exit lane: confluence at the first point where the paths join.
        let mut hint = 0usize;
        for (idx, p) in route_i.pts.iter().enumerate() {
            let proj = route_j.project(*p, Some(hint));
            hint = proj.seg;
            if proj.lateral.abs() < JOIN_TOL && proj.s >= -0.5 {
                return Ok(Some(ConflictPoint {
                    position: *p,
                    conflict_type: ConflictType::Confluence,
                    s_i: route_i.cum[idx],
                    s_j: proj.s,
                }));
            }
        }
        return Err(Error::InvalidRoute("routes share an exit lane but never merge".into()));
    }

    // General sweep for cross conflicts.
    let threshold = 0.5 * route_i.lane_width.min(route_j.lane_width);
    let Some((ia, jb)) = closest_contact(route_i, route_j, threshold) else {
        return Ok(None);
    };
    // Refine with the exact closest pair over the local segments.
    let mut best = (f64::INFINITY, route_i.pts[ia], route_j.pts[jb], ia, jb);
    for i in ia.saturating_sub(2)..(ia + 2).min(route_i.pts.len() - 1) {
        for j in jb.saturating_sub(2)..(jb + 2).min(route_j.pts.len() - 1) {
            let (pa, pb, d) = segment_closest_pair(
                route_i.pts[i],
                route_i.pts[i + 1],
                route_j.pts[j],
                route_j.pts[j + 1],
            );
            if d < best.0 {
                best = (d, pa, pb, i, j);
            }
        }
    }
    let position = best.1.add(best.2).scale(0.5);
    let s_i = route_i.project(position, Some(best.3)).s;
    let s_j = route_j.project(position, Some(best.4)).s;
    let angle = angle_diff(route_i.tangent_at(s_i), route_j.tangent_at(s_j)).abs();
    if angle > CROSS_ANGLE_THRESHOLD {
        Ok(Some(ConflictPoint { position, conflict_type: ConflictType::Cross, s_i, s_j }))
    } else {
        Ok(None)
    }
}

/// Earliest contact between the two polylines under `threshold`, symmetric in
/// the pair order: among all contact clusters the one with the smallest
/// `min(s_i, s_j)` wins, ties broken by the other arc length.
fn closest_contact(a: &Route, b: &Route, threshold: f64) -> Option<(usize, usize)> {
    let stride = 8usize;
    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    let coarse = threshold + stride as f64 * ROUTE_STEP * 1.5;
    let mut i = 0;
    while i < a.pts.len() {
        let mut j = 0;
        let mut best = (f64::INFINITY, 0usize);
        while j < b.pts.len() {
            let d = a.pts[i].dist(b.pts[j]);
            if d < best.0 {
                best = (d, j);
            }
            j += stride;
        }
        if best.0 < coarse {
            // refine around (i, best.1)
            for fi in i.saturating_sub(stride)..(i + stride).min(a.pts.len()) {
                for fj in best.1.saturating_sub(stride)..(best.1 + stride).min(b.pts.len()) {
                    let d = a.pts[fi].dist(b.pts[fj]);
                    if d < threshold {
                        candidates.push((fi, fj, d));
                    }
                }
            }
        }
        i += stride;
    }
    if candidates.is_empty() {
        return None;
    }
    // Group contiguous clusters along route a, then pick symmetrically.
    candidates.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.cmp(&y.1)));
    let mut clusters: Vec<(usize, usize, f64)> = Vec::new(); // representative (ia, jb, d)
    let mut current: Option<(usize, usize, f64)> = None;
    let mut last_i = 0usize;
    for (ci, cj, cd) in candidates {
        match current {
            Some(ref mut rep) => {
                if ci > last_i + 2 * stride {
                    clusters.push(*rep);
                    *rep = (ci, cj, cd);
                } else if cd < rep.2 {
                    *rep = (ci, cj, cd);
                }
            }
            None => current = Some((ci, cj, cd)),
        }
        last_i = ci;
    }
    if let Some(rep) = current {
        clusters.push(rep);
    }
    clusters
        .into_iter()
        .min_by(|x, y| {
            let kx = (a.cum[x.0].min(b.cum[x.1]), a.cum[x.0].max(b.cum[x.1]));
            let ky = (a.cum[y.0].min(b.cum[y.1]), a.cum[y.0].max(b.cum[y.1]));
            kx.partial_cmp(&ky).unwrap()
        })
        .map(|c| (c.0, c.1))
}

/// Closest pair of points between two segments and their distance.
fn segment_closest_pair(a0: Vec2, a1: Vec2, b0: Vec2, b1: Vec2) -> (Vec2, Vec2, f64) {
    // Check for a proper intersection first.
    let d1 = a1.sub(a0);
    let d2 = b1.sub(b0);
    let denom = d1.cross(d2);
    if denom.abs() > 1e-12 {
        let t = b0.sub(a0).cross(d2) / denom;
        let u = b0.sub(a0).cross(d1) / denom;
        if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u) {
            let p = a0.add(d1.scale(t));
            return (p, p, 0.0);
        }
    }
    let mut best = (f64::INFINITY, a0, b0);
    for (p, q0, q1, swap) in [(a0, b0, b1, false), (a1, b0, b1, false), (b0, a0, a1, true), (b1, a0, a1, true)] {
        let (proj, _) = project_on_segment(p, q0, q1);
        let d = p.dist(proj);
        if d < best.0 {
            best = if swap { (d, proj, p) } else { (d, p, proj) };
        }
    }
    (best.1, best.2, best.0)
}

/// Interaction roles of all other vehicles relative to one host.
#[derive(Debug, Clone)]
pub struct RoleAssignment {
    pub host: usize,
    /// Leading vehicle: the nearest vehicle ahead on the host's own path.
    pub lv: Option<usize>,
    /// Neighbour-conflict vehicles with the shared conflict point
    /// (arc lengths oriented host-first).
    pub nvs: Vec<(usize, ConflictPoint)>,
    /// Remaining active vehicles, irrelevant to the host this step.
    pub ivs: Vec<usize>,
}

/// Assign LV / NV / IV roles for `host`. `active[i]` marks vehicles that take
/// part in interactions (outside vehicles are excluded). `conflicts[i][j]`
/// holds the route conflict between vehicles `i` and `j` oriented `i`-first.
pub fn assign_roles(
    host: usize,
    states: &[VehicleState],
    routes: &[Route],
    conflicts: &dyn Fn(usize, usize) -> Option<ConflictPoint>,
    active: &[bool],
) -> RoleAssignment {
    let host_route = &routes[host];
    let host_s = host_route.project(states[host].position(), None).s;
    let mut lv: Option<(usize, f64)> = None;
    let mut nvs = Vec::new();
    let mut ivs = Vec::new();
    for j in 0..states.len() {
        if j == host || !active[j] {
            continue;
        }
        let proj = host_route.project(states[j].position(), None);
        let on_path = proj.lateral.abs() < 0.5 * host_route.lane_width
            && proj.s > host_s
            && proj.s < host_route.length() + host_route.lane_width
            && angle_diff(states[j].yaw, proj.tangent).abs() < PI / 3.0;
        if on_path {
            let gap = proj.s - host_s;
            if lv.map_or(true, |(_, g)| gap < g) {
                lv = Some((j, gap));
            }
        }
    }
    for j in 0..states.len() {
        if j == host || !active[j] || Some(j) == lv.map(|(i, _)| i) {
            continue;
        }
        match conflicts(host, j) {
            Some(cp) if cp.conflict_type != ConflictType::Following => nvs.push((j, cp)),
            _ => ivs.push(j),
        }
    }
    RoleAssignment { host, lv: lv.map(|(i, _)| i), nvs, ivs }
}

/// Zone of a vehicle along its route: ready (before the CZ), passing (inside),
/// outside (beyond). Determined by route arc length, which makes the
/// RV -> PV -> OV transitions monotone.
pub fn vehicle_zone(state: &VehicleState, route: &Route, _geometry: &IntersectionGeometry) -> Zone {
    let s = route.project(state.position(), None).s;
    zone_at(s, route)
}

pub fn zone_at(s: f64, route: &Route) -> Zone {
    if s < route.cz_enter_s {
        Zone::Rv
    } else if s <= route.cz_exit_s {
        Zone::Pv
    } else {
        Zone::Ov
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geo() -> IntersectionGeometry {
        IntersectionGeometry::cross()
    }

    // Arms of the standard crossing: 0 = east, 1 = north, 2 = west, 3 = south.
    const EAST: usize = 0;
    const NORTH: usize = 1;
    const WEST: usize = 2;
    const SOUTH: usize = 3;

    fn lane(arm: usize, lane: usize) -> LaneRef {
        LaneRef { arm, lane }
    }

    #[test]
    fn route_arc_length_strictly_increasing() {
        let g = geo();
        let r = Route::build(&g, lane(SOUTH, 0), lane(WEST, 0)).unwrap();
        assert_eq!(r.maneuver, Maneuver::Left);
        for i in 1..r.cum.len() {
            assert!(r.cum[i] > r.cum[i - 1]);
            assert!(r.cum[i] - r.cum[i - 1] <= 0.5 + 1e-9);
        }
    }

    #[test]
    fn left_turn_geometry_matches_hand_calculation() {
        // South inner lane to west inner lane: fillet of radius 14 about
        // (-12, -12), tangent points (2, -12) and (-12, 2).
        let g = geo();
        let r = Route::build(&g, lane(SOUTH, 0), lane(WEST, 0)).unwrap();
        let center = Vec2::new(-12.0, -12.0);
        for p in r.pts.iter().filter(|p| g.in_conflict_zone(**p)) {
            assert!((p.dist(center) - 14.0).abs() < 1e-6, "point {p:?} off the fillet");
        }
        assert!(r.pts.iter().any(|p| p.dist(Vec2::new(2.0, -12.0)) < 0.11));
        assert!(r.pts.iter().any(|p| p.dist(Vec2::new(-12.0, 2.0)) < 0.11));
    }

    #[test]
    fn straight_route_is_a_straight_line() {
        let g = geo();
        let r = Route::build(&g, lane(WEST, 1), lane(EAST, 1)).unwrap();
        assert_eq!(r.maneuver, Maneuver::Straight);
        for p in &r.pts {
            assert!((p.y + 6.0).abs() < 1e-9);
        }
        assert!((r.length() - 2.0 * (80.0 + 12.0)).abs() < 1e-6);
    }

    #[test]
    fn projection_reports_signed_offset_and_arc() {
        let g = geo();
        let r = Route::build(&g, lane(WEST, 1), lane(EAST, 1)).unwrap();
        let p = r.project(Vec2::new(-28.0, -6.5), None);
        // Travelling east: a point at smaller y is to the right (negative lateral).
        assert!((p.lateral + 0.5).abs() < 1e-9);
        assert!((p.s - (92.0 - 28.0)).abs() < 1e-6);
        assert!((p.tangent - 0.0).abs() < 1e-9);
        // Beyond the end the final segment extends virtually.
        let q = r.project(Vec2::new(100.0, -6.0), None);
        assert!(q.s > r.length());
    }

    #[test]
    fn identical_routes_are_following() {
        let g = geo();
        let a = Route::build(&g, lane(SOUTH, 0), lane(WEST, 0)).unwrap();
        let b = Route::build(&g, lane(SOUTH, 0), lane(WEST, 0)).unwrap();
        let cp = classify_conflict(&a, &b).unwrap().unwrap();
        assert_eq!(cp.conflict_type, ConflictType::Following);
        // Identical paths diverge only at the route end.
        assert!((cp.s_i - a.length()).abs() < 0.2);
    }

    #[test]
    fn shared_entry_lane_is_following_until_divergence() {
        // Case-2 shape: two left turns from the same north lane into
        // different exit lanes diverge inside the conflict zone.
        let g = geo();
        let a = Route::build(&g, lane(NORTH, 0), lane(EAST, 1)).unwrap();
        let b = Route::build(&g, lane(NORTH, 0), lane(EAST, 0)).unwrap();
        let cp = classify_conflict(&a, &b).unwrap().unwrap();
        assert_eq!(cp.conflict_type, ConflictType::Following);
        assert!(cp.s_i < a.length() * 0.75, "divergence should be before the exits");
    }

    #[test]
    fn perpendicular_straights_cross_at_centerline_intersection() {
        let g = geo();
        let a = Route::build(&g, lane(WEST, 1), lane(EAST, 1)).unwrap(); // y = -6 eastbound
        let b = Route::build(&g, lane(NORTH, 1), lane(SOUTH, 1)).unwrap(); // x = -6 southbound
        let cp = classify_conflict(&a, &b).unwrap().unwrap();
        assert_eq!(cp.conflict_type, ConflictType::Cross);
        assert!(cp.position.dist(Vec2::new(-6.0, -6.0)) < 1e-6);
        let swapped = classify_conflict(&b, &a).unwrap().unwrap();
        assert_eq!(swapped.conflict_type, ConflictType::Cross);
        assert!(swapped.position.dist(cp.position) < 1e-9);
        assert!((swapped.s_i - cp.s_j).abs() < 1e-9);
    }

    #[test]
    fn case1_left_turns_cross_at_circle_intersection() {
        // Two left-turn fillets of radius 14 about (-12,-12) and (12,-12)
        // intersect at (0, -12 + sqrt(52)).
        let g = geo();
        let a = Route::build(&g, lane(SOUTH, 0), lane(WEST, 0)).unwrap();
        let b = Route::build(&g, lane(EAST, 0), lane(SOUTH, 0)).unwrap();
        let cp = classify_conflict(&a, &b).unwrap().unwrap();
        assert_eq!(cp.conflict_type, ConflictType::Cross);
        let expect = Vec2::new(0.0, -4.7888974490720214);
        assert!(cp.position.dist(expect) < 2e-3, "cp at {:?}", cp.position);
    }

    #[test]
    fn confluence_at_merge_point_with_sweep_oracle() {
        // North->east left turn and south->east right turn into the same
        // eastbound lane. Frozen expectation (16, -6): the right turn uses the
        // minimum fillet radius 6 from corner (10, -6), so it joins the exit
        // lane at x = 10 + 6.
        let g = geo();
        let a = Route::build(&g, lane(NORTH, 0), lane(EAST, 1)).unwrap();
        let b = Route::build(&g, lane(SOUTH, 2), lane(EAST, 1)).unwrap();
        let cp = classify_conflict(&b, &a).unwrap().unwrap();
        assert_eq!(cp.conflict_type, ConflictType::Confluence);
        assert!(cp.position.dist(Vec2::new(16.0, -6.0)) < 0.05, "cp at {:?}", cp.position);

        // Independent oracle: brute-force closest-approach sweep at 1 cm
        // resolution over both polylines, earliest host point that touches.
        // The merge is tangential, so the oracle's contact point smears a few
        // decimetres back along the approach; the merge point must sit within
        // that smear of the oracle contact.
        let resample = |r: &Route| -> Vec<Vec2> {
            let n = (r.length() / 0.01).ceil() as usize;
            (0..=n).map(|k| r.point_at(r.length() * k as f64 / n as f64)).collect()
        };
        let pa = resample(&b);
        let pb = resample(&a);
        let mut oracle = None;
        'outer: for p in &pa {
            for q in pb.iter() {
                if p.dist(*q) < 0.005 {
                    oracle = Some(*p);
                    break 'outer;
                }
            }
        }
        let oracle = oracle.expect("oracle found no merge point");
        assert!(cp.position.dist(oracle) < 0.4, "sweep oracle {oracle:?} vs {:?}", cp.position);
        assert!(cp.position.sub(oracle).dot(Vec2::new(1.0, 0.0)) >= 0.0, "merge point precedes oracle contact");
    }

    #[test]
    fn distant_routes_do_not_conflict() {
        let g = geo();
        let a = Route::build(&g, lane(EAST, 0), lane(SOUTH, 0)).unwrap();
        let b = Route::build(&g, lane(WEST, 0), lane(NORTH, 0)).unwrap();
        assert!(classify_conflict(&a, &b).unwrap().is_none());
    }

    #[test]
    fn degenerate_route_is_an_error() {
        let g = geo();
        let mut a = Route::build(&g, lane(EAST, 0), lane(SOUTH, 0)).unwrap();
        let b = Route::build(&g, lane(WEST, 0), lane(NORTH, 0)).unwrap();
        a.pts.truncate(1);
        assert!(matches!(classify_conflict(&a, &b), Err(Error::InvalidRoute(_))));
    }

    #[test]
    fn mirrored_routes_have_mirrored_conflict_points() {
        let g = geo();
        let a = Route::build(&g, lane(SOUTH, 0), lane(WEST, 0)).unwrap();
        let b = Route::build(&g, lane(EAST, 0), lane(SOUTH, 0)).unwrap();
        let cp = classify_conflict(&a, &b).unwrap().unwrap();
        let mirror = |r: &Route| {
            let mut m = r.clone();
            for p in &mut m.pts {
                p.y = -p.y;
            }
            m
        };
        let cpm = classify_conflict(&mirror(&a), &mirror(&b)).unwrap().unwrap();
        assert_eq!(cp.conflict_type, cpm.conflict_type);
        assert!((cpm.position.x - cp.position.x).abs() < 1e-9);
        assert!((cpm.position.y + cp.position.y).abs() < 1e-9);
    }

    fn states_routes_case1(g: &IntersectionGeometry) -> (Vec<VehicleState>, Vec<Route>) {
        let routes = vec![
            Route::build(g, lane(SOUTH, 0), lane(WEST, 0)).unwrap(),
            Route::build(g, lane(EAST, 0), lane(SOUTH, 0)).unwrap(),
            Route::build(g, lane(WEST, 0), lane(NORTH, 0)).unwrap(),
        ];
        let states = vec![
            VehicleState::new(5.5, PI / 2.0, 2.0, -25.0),
            VehicleState::new(4.5, PI, 18.0, 2.0),
            VehicleState::new(5.0, 0.0, -30.0, -2.0),
        ];
        (states, routes)
    }

    #[test]
    fn roles_single_vehicle() {
        let g = geo();
        let (states, routes) = states_routes_case1(&g);
        let conflicts = |_: usize, _: usize| None;
        let r = assign_roles(0, &states[..1], &routes[..1], &conflicts, &[true]);
        assert!(r.lv.is_none());
        assert!(r.nvs.is_empty());
        assert!(r.ivs.is_empty());
    }

    #[test]
    fn roles_case1_cross_neighbours() {
        let g = geo();
        let (states, routes) = states_routes_case1(&g);
        let mut cps = std::collections::HashMap::new();
        for i in 0..3 {
            for j in (i + 1)..3 {
                if let Some(cp) = classify_conflict(&routes[i], &routes[j]).unwrap() {
                    cps.insert((i, j), cp);
                }
            }
        }
        // Two left-turn fillets on opposite corners never meet.
        assert!(!cps.contains_key(&(1, 2)));
        let conflicts = |i: usize, j: usize| {
            let key = (i.min(j), i.max(j));
            cps.get(&key).map(|cp| if i < j { *cp } else { cp.swapped() })
        };
        let active = [true, true, true];
        let r0 = assign_roles(0, &states, &routes, &conflicts, &active);
        assert!(r0.lv.is_none());
        let mut nv0: Vec<usize> = r0.nvs.iter().map(|(j, _)| *j).collect();
        nv0.sort();
        assert_eq!(nv0, vec![1, 2]);
        let r1 = assign_roles(1, &states, &routes, &conflicts, &active);
        assert_eq!(r1.nvs.iter().map(|(j, _)| *j).collect::<Vec<_>>(), vec![0]);
        assert_eq!(r1.ivs, vec![2]);
        // Roles partition the active set.
        for r in [&r0, &r1] {
            let mut all: Vec<usize> = r.nvs.iter().map(|(j, _)| *j).collect();
            all.extend(&r.ivs);
            all.extend(r.lv);
            all.push(r.host);
            all.sort();
            assert_eq!(all, vec![0, 1, 2]);
        }
    }

    #[test]
    fn roles_leading_vehicle_on_shared_lane() {
        // Case-2 shape: V4 ahead of V3 on the same left-turn approach.
        let g = geo();
        let r3 = Route::build(&g, lane(NORTH, 0), lane(EAST, 1)).unwrap();
        let r4 = Route::build(&g, lane(NORTH, 0), lane(EAST, 0)).unwrap();
        let routes = vec![r3, r4];
        let states = vec![
            VehicleState::new(5.5, -PI / 2.0, -2.0, 16.0),
            VehicleState::new(5.0, -PI / 2.0, -2.0, 10.0),
        ];
        let conflicts = |_: usize, _: usize| None;
        let r = assign_roles(0, &states, &routes, &conflicts, &[true, true]);
        assert_eq!(r.lv, Some(1));

        // Once the leader has turned off onto its own exit, it stops leading.
        let diverged = vec![states[0], VehicleState::new(5.0, -0.8, 4.0, 2.0)];
        let r = assign_roles(0, &diverged, &routes, &conflicts, &[true, true]);
        assert_eq!(r.lv, None);
    }

    #[test]
    fn zone_examples_and_monotonicity() {
        let g = geo();
        let route = Route::build(&g, lane(SOUTH, 0), lane(WEST, 0)).unwrap();
        let rv = VehicleState::new(5.0, PI / 2.0, 2.0, -25.0);
        assert_eq!(vehicle_zone(&rv, &route, &g), Zone::Rv);
        let pv = VehicleState::new(5.0, PI / 2.0, 0.0, 0.0);
        assert_eq!(vehicle_zone(&pv, &route, &g), Zone::Pv);
        let ov = VehicleState::new(5.0, PI, -12.0 - 50.0, 2.0);
        assert_eq!(vehicle_zone(&ov, &route, &g), Zone::Ov);

        let mut seen_pv = false;
        let mut seen_ov = false;
        let n = (route.length() / 0.25) as usize;
        for k in 0..=n {
            let s = route.length() * k as f64 / n as f64;
            match zone_at(s, &route) {
                Zone::Rv => assert!(!seen_pv && !seen_ov),
                Zone::Pv => {
                    assert!(!seen_ov);
                    seen_pv = true;
                }
                Zone::Ov => seen_ov = true,
            }
        }
        assert!(seen_pv && seen_ov);
    }
}
