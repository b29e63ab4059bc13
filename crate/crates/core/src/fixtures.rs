//! Built-in benchmark scenarios.
//!
//! Case 1: three vehicles turning left from three arms of a four-arm crossing,
//! producing two cross conflicts (V1-V2 and V1-V3). The four variants differ
//! only in the aggressiveness mix.
//!
//! Case 2: five vehicles with all three conflict kinds — a cross between the
//! two straight-through vehicles, a following pair on the shared left-turn
//! approach, and two confluences into the middle eastbound lane.

pub const CASE1_SCENARIO_A: &str = include_str!("../fixtures/case1_scenario_a.toml");
pub const CASE1_SCENARIO_B: &str = include_str!("../fixtures/case1_scenario_b.toml");
pub const CASE1_SCENARIO_C: &str = include_str!("../fixtures/case1_scenario_c.toml");
pub const CASE1_SCENARIO_D: &str = include_str!("../fixtures/case1_scenario_d.toml");
pub const CASE2_SCENARIO_A: &str = include_str!("../fixtures/case2_scenario_a.toml");
pub const CASE2_SCENARIO_B: &str = include_str!("../fixtures/case2_scenario_b.toml");

const ALL: [(&str, &str); 6] = [
    ("case1_scenario_a", CASE1_SCENARIO_A),
    ("case1_scenario_b", CASE1_SCENARIO_B),
    ("case1_scenario_c", CASE1_SCENARIO_C),
    ("case1_scenario_d", CASE1_SCENARIO_D),
    ("case2_scenario_a", CASE2_SCENARIO_A),
    ("case2_scenario_b", CASE2_SCENARIO_B),
];

/// Scenario text of a built-in fixture, by name.
pub fn fixture(name: &str) -> Option<&'static str> {
    ALL.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn fixture_names() -> impl Iterator<Item = &'static str> {
    ALL.iter().map(|(n, _)| *n)
}
