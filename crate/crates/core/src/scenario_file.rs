//! Scenario files: a versioned, strictly parsed TOML schema describing the
//! intersection, the risk model settings and every vehicle.
//!
//! Unknown fields are rejected. All sections except `[[vehicle]]` carry
//! defaults; per-vehicle sub-tables override the scenario-wide sections. The
//! fully resolved configuration re-serializes to a canonical document whose
//! FNV-1a digest is the config hash echoed into every output file.
//!
//! ```toml
//! schema = 1
//! name = "example"
//!
//! [geometry]
//! arms = 4
//! lanes_per_arm = 3
//! lane_width = 4.0
//! cz_half_extent = 12.0
//!
//! [risk]
//! gamma_sf = 0.2
//! horizon = 3.0
//!
//! [[vehicle]]
//! id = "V1"
//! entry = "south:0"   # arm name (4-arm layouts) or index, ":", lane index
//! exit = "west:0"
//! start = [2.0, -25.0]
//! speed = 5.5
//! kappa = 0.5
//! ```

use serde::{Deserialize, Serialize};

use crate::cost::CostWeights;
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::risk::FieldParams;
use crate::scenario::{IntersectionGeometry, LaneRef, Route};
use crate::vehicle::{VehicleConfig, VehicleState};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema: u32,
    #[serde(default)]
    pub name: Option<String>,
    pub geometry: GeometrySection,
    #[serde(default)]
    pub risk: RiskSection,
    #[serde(default)]
    pub weights: CostWeights,
    #[serde(default)]
    pub limits: LimitsSection,
    #[serde(default)]
    pub body: BodySection,
    #[serde(rename = "vehicle")]
    pub vehicles: Vec<VehicleSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub arms: usize,
    pub lanes_per_arm: usize,
    pub lane_width: f64,
    pub cz_half_extent: f64,
    #[serde(default = "default_approach")]
    pub approach_length: f64,
    #[serde(default = "default_turn_radius")]
    pub min_turn_radius: f64,
}

fn default_approach() -> f64 {
    80.0
}

fn default_turn_radius() -> f64 {
    6.0
}

/// Scenario-level risk settings plus default potential-field coefficients.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RiskSection {
    /// Safe threshold on the pairwise potential at a conflict point.
    pub gamma_sf: f64,
    /// Prediction (and game) horizon [s].
    pub horizon: f64,
    /// A triggered game closes only below `hysteresis * gamma_sf`.
    pub hysteresis: f64,
    pub a0: f64,
    pub b: f64,
    pub c: f64,
    pub t_p: f64,
}

impl Default for RiskSection {
    fn default() -> Self {
        let f = FieldParams::default();
        RiskSection {
            gamma_sf: 0.2,
            horizon: 3.0,
            hysteresis: 0.8,
            a0: f.a0,
            b: f.b,
            c: f.c,
            t_p: f.t_p,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LimitsSection {
    pub a_min: f64,
    pub a_max: f64,
    pub delta_max: f64,
    pub v_max: f64,
}

impl Default for LimitsSection {
    fn default() -> Self {
        let c = VehicleConfig::default();
        LimitsSection { a_min: c.a_min, a_max: c.a_max, delta_max: c.delta_max, v_max: c.v_max }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BodySection {
    pub l_f: f64,
    pub l_r: f64,
    pub width: f64,
}

impl Default for BodySection {
    fn default() -> Self {
        let c = VehicleConfig::default();
        BodySection { l_f: c.l_f, l_r: c.l_r, width: c.width }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSection {
    pub id: String,
    /// `arm:lane`, e.g. `south:0` or `3:0`; lane 0 is innermost.
    pub entry: String,
    pub exit: String,
    pub start: [f64; 2],
    /// Initial speed [m/s].
    pub speed: f64,
    /// Aggressiveness in [0, 1].
    pub kappa: f64,
    /// Initial yaw [rad]; defaults to the route tangent at the start point.
    #[serde(default)]
    pub yaw: Option<f64>,
    #[serde(default)]
    pub weights: Option<CostWeights>,
    #[serde(default)]
    pub limits: Option<LimitsSection>,
    #[serde(default)]
    pub body: Option<BodySection>,
    #[serde(default)]
    pub field: Option<FieldParams>,
}

/// A fully resolved scenario: geometry, routes and per-vehicle configs.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub geometry: IntersectionGeometry,
    pub gamma_sf: f64,
    pub hysteresis: f64,
    pub horizon: f64,
    pub vehicles: Vec<VehicleSpec>,
    /// Canonical re-serialization of the resolved configuration.
    pub canonical: String,
    /// FNV-1a digest of `canonical`, hex encoded.
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct VehicleSpec {
    pub id: String,
    pub config: VehicleConfig,
    pub entry: LaneRef,
    pub exit: LaneRef,
    pub route: Route,
    pub start: VehicleState,
}

pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let file: ScenarioFile =
        toml::from_str(text).map_err(|e| Error::Scenario(format!("scenario parse error: {e}")))?;
    resolve(file)
}

pub fn parse_scenario_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Scenario> {
    let mut file: ScenarioFile =
        toml::from_str(text).map_err(|e| Error::Scenario(format!("scenario parse error: {e}")))?;
    for (key, value) in overrides {
        apply_override(&mut file, key, value)?;
    }
    resolve(file)
}

fn arm_index(name: &str, geometry: &GeometrySection) -> Result<usize> {
    let idx = if geometry.arms == 4 {
        match name {
            "east" => Some(0),
            "north" => Some(1),
            "west" => Some(2),
            "south" => Some(3),
            _ => None,
        }
    } else {
        None
    };
    match idx {
        Some(i) => Ok(i),
        None => name
            .parse::<usize>()
            .ok()
            .filter(|i| *i < geometry.arms)
            .ok_or_else(|| Error::Scenario(format!("unknown arm `{name}`"))),
    }
}

fn lane_ref(spec: &str, geometry: &GeometrySection) -> Result<LaneRef> {
    let (arm, lane) = spec
        .split_once(':')
        .ok_or_else(|| Error::Scenario(format!("lane reference `{spec}` must be `arm:lane`")))?;
    let lane: usize = lane
        .parse()
        .map_err(|_| Error::Scenario(format!("bad lane index in `{spec}`")))?;
    if lane >= geometry.lanes_per_arm {
        return Err(Error::Scenario(format!("lane {lane} out of range in `{spec}`")));
    }
    Ok(LaneRef { arm: arm_index(arm, geometry)?, lane })
}

fn resolve(file: ScenarioFile) -> Result<Scenario> {
    if file.schema != SCHEMA_VERSION {
        return Err(Error::Scenario(format!(
            "unsupported schema version {} (expected {SCHEMA_VERSION})",
            file.schema
        )));
    }
    if file.vehicles.is_empty() {
        return Err(Error::Scenario("scenario has no vehicles".into()));
    }
    let gs = &file.geometry;
    let mut geometry = IntersectionGeometry::radial(gs.arms, gs.lanes_per_arm, gs.lane_width, gs.cz_half_extent);
    geometry.approach_length = gs.approach_length;
    geometry.min_turn_radius = gs.min_turn_radius;
    geometry.validate()?;

    if file.risk.gamma_sf <= 0.0 || file.risk.horizon <= 0.0 || !(0.0..=1.0).contains(&file.risk.hysteresis) {
        return Err(Error::Scenario("risk section: gamma_sf and horizon must be positive, hysteresis in [0,1]".into()));
    }
    file.weights.validate()?;

    let default_field =
        FieldParams { a0: file.risk.a0, b: file.risk.b, c: file.risk.c, t_p: file.risk.t_p };
    default_field.validate()?;

    let mut vehicles = Vec::with_capacity(file.vehicles.len());
    let mut canonical_vehicles = Vec::with_capacity(file.vehicles.len());
    for v in &file.vehicles {
        if vehicles.iter().any(|spec: &VehicleSpec| spec.id == v.id) {
            return Err(Error::Scenario(format!("duplicate vehicle id `{}`", v.id)));
        }
        if !(0.0..=1.0).contains(&v.kappa) {
            return Err(Error::Scenario(format!("vehicle {}: kappa {} outside [0, 1]", v.id, v.kappa)));
        }
        if v.speed < 0.0 {
            return Err(Error::Scenario(format!("vehicle {}: negative speed", v.id)));
        }
        let entry = lane_ref(&v.entry, gs)?;
        let exit = lane_ref(&v.exit, gs)?;
        let route = Route::build(&geometry, entry, exit)?;
        let body = v.body.unwrap_or(file.body);
        let limits = v.limits.unwrap_or(file.limits);
        let weights = v.weights.unwrap_or(file.weights);
        let field = v.field.unwrap_or(default_field);
        let config = VehicleConfig {
            l_f: body.l_f,
            l_r: body.l_r,
            width: body.width,
            a_min: limits.a_min,
            a_max: limits.a_max,
            delta_max: limits.delta_max,
            v_max: limits.v_max,
            kappa: v.kappa,
            field,
            weights,
        };
        config.validate()?;
        weights.validate()?;
        field.validate()?;

        let pos = Vec2::new(v.start[0], v.start[1]);
        let proj = route.project(pos, None);
        if proj.lateral.abs() > 2.0 * geometry.lane_width {
            return Err(Error::Scenario(format!(
                "vehicle {}: start {:?} is {:.1} m off its route",
                v.id, v.start, proj.lateral.abs()
            )));
        }
        let yaw = v.yaw.unwrap_or(proj.tangent);
        let start = VehicleState::new(v.speed, yaw, pos.x, pos.y);
        canonical_vehicles.push(VehicleSection {
            id: v.id.clone(),
            entry: v.entry.clone(),
            exit: v.exit.clone(),
            start: v.start,
            speed: v.speed,
            kappa: v.kappa,
            yaw: Some(yaw),
            weights: Some(weights),
            limits: Some(limits),
            body: Some(body),
            field: Some(field),
        });
        vehicles.push(VehicleSpec { id: v.id.clone(), config, entry, exit, route, start });
    }

    let name = file.name.clone().unwrap_or_else(|| "unnamed".into());
    let canonical_file = ScenarioFile {
        schema: file.schema,
        name: Some(name.clone()),
        geometry: file.geometry.clone(),
        risk: file.risk.clone(),
        weights: file.weights,
        limits: file.limits,
        body: file.body,
        vehicles: canonical_vehicles,
    };
    let canonical = toml::to_string(&canonical_file)
        .map_err(|e| Error::Scenario(format!("canonical serialization failed: {e}")))?;
    let config_hash = format!("{:016x}", fnv1a64(canonical.as_bytes()));

    Ok(Scenario {
        name,
        geometry,
        gamma_sf: file.risk.gamma_sf,
        hysteresis: file.risk.hysteresis,
        horizon: file.risk.horizon,
        vehicles,
        canonical,
        config_hash,
    })
}

/// Apply a `key=value` style override onto the parsed file. Supported keys:
/// `risk.*`, `weights.*`, `limits.*`, `body.*`, `vehicles.<id>.kappa`,
/// `vehicles.<id>.speed`, `vehicles.<id>.yaw`, `vehicles.<id>.weights.*`.
pub fn apply_override(file: &mut ScenarioFile, key: &str, value: &str) -> Result<()> {
    let bad_key = || Error::Scenario(format!("unknown override key `{key}`"));
    let num = || -> Result<f64> {
        value
            .parse::<f64>()
            .map_err(|_| Error::Scenario(format!("override `{key}`: `{value}` is not a number")))
    };
    let parts: Vec<&str> = key.split('.').collect();
    match parts.as_slice() {
        ["risk", field] => {
            let r = &mut file.risk;
            match *field {
                "gamma_sf" => r.gamma_sf = num()?,
                "horizon" => r.horizon = num()?,
                "hysteresis" => r.hysteresis = num()?,
                "a0" => r.a0 = num()?,
                "b" => r.b = num()?,
                "c" => r.c = num()?,
                "t_p" => r.t_p = num()?,
                _ => return Err(bad_key()),
            }
        }
        ["weights", field] => set_weight(&mut file.weights, field, num()?).ok_or_else(bad_key)?,
        ["limits", field] => {
            let l = &mut file.limits;
            match *field {
                "a_min" => l.a_min = num()?,
                "a_max" => l.a_max = num()?,
                "delta_max" => l.delta_max = num()?,
                "v_max" => l.v_max = num()?,
                _ => return Err(bad_key()),
            }
        }
        ["body", field] => {
            let b = &mut file.body;
            match *field {
                "l_f" => b.l_f = num()?,
                "l_r" => b.l_r = num()?,
                "width" => b.width = num()?,
                _ => return Err(bad_key()),
            }
        }
        ["vehicles", id, rest @ ..] => {
            let default_weights = file.weights;
            let v = file
                .vehicles
                .iter_mut()
                .find(|v| v.id == *id)
                .ok_or_else(|| Error::Scenario(format!("override `{key}`: no vehicle `{id}`")))?;
            match rest {
                ["kappa"] => v.kappa = num()?,
                ["speed"] => v.speed = num()?,
                ["yaw"] => v.yaw = Some(num()?),
                ["weights", field] => {
                    let mut w = v.weights.unwrap_or(default_weights);
                    set_weight(&mut w, field, num()?).ok_or_else(bad_key)?;
                    v.weights = Some(w);
                }
                _ => return Err(bad_key()),
            }
        }
        _ => return Err(bad_key()),
    }
    Ok(())
}

fn set_weight(w: &mut CostWeights, field: &str, value: f64) -> Option<()> {
    match field {
        "k_s_log" => w.k_s_log = value,
        "k_s_lat" => w.k_s_lat = value,
        "k_s_lk" => w.k_s_lk = value,
        "k_y_lk" => w.k_y_lk = value,
        "k_phi_lk" => w.k_phi_lk = value,
        "k_e" => w.k_e = value,
        "eps_reg" => w.eps_reg = value,
        _ => return None,
    }
    Some(())
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
