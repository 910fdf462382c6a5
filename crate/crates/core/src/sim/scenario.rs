//! Doorway and intersection geometry, perturbations and the fixed
//! robustness suite.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{AgentState, KinodynamicLimits};
use crate::world::{AgentSnapshot, Circle, Route, Vec2};

pub const AGENT_RADIUS: f64 = 0.1;
/// Wall circles share the agent radius, one radius apart.
pub const WALL_RADIUS: f64 = 0.1;
pub const WALL_SPACING: f64 = 0.1;
pub const DOOR_GAP: f64 = 0.3;
/// Each doorway wall runs from the gap out to this |y|.
pub const DOOR_WALL_EXTENT: f64 = 2.5;
pub const CORRIDOR_WIDTH: f64 = 0.35;
pub const CORRIDOR_EXTENT: f64 = 2.0;
pub const DEFAULT_HORIZON: f64 = 18.0;
pub const DEFAULT_GOAL_TOLERANCE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Doorway,
    Intersection,
}

impl std::str::FromStr for ScenarioKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "doorway" => Ok(Self::Doorway),
            "intersection" => Ok(Self::Intersection),
            _ => Err(format!("unknown scenario '{s}' (expected doorway or intersection)")),
        }
    }
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Doorway => "doorway",
            Self::Intersection => "intersection",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub start: AgentState,
    pub goal: Vec2,
    /// Intermediate points of the preferred route (the doorway gap center).
    pub waypoints: Vec<Vec2>,
    pub radius: f64,
}

impl AgentSpec {
    pub fn route(&self) -> Route {
        Route {
            waypoints: self.waypoints.clone(),
            goal: self.goal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub kind: ScenarioKind,
    pub agents: Vec<AgentSpec>,
    pub obstacles: Vec<Circle>,
    pub limits: KinodynamicLimits,
    /// Seconds.
    pub horizon: f64,
    pub goal_tolerance: f64,
}

impl ScenarioSpec {
    pub fn max_steps(&self) -> usize {
        (self.horizon / self.limits.dt).round() as usize
    }

    /// Same geometry with a single agent, as used for the desired path.
    pub fn solo(&self, agent: usize) -> ScenarioSpec {
        let mut s = self.clone();
        s.agents = vec![self.agents[agent].clone()];
        s.name = format!("{}/solo{agent}", self.name);
        s
    }

    pub fn initial_agents(&self) -> Vec<AgentSnapshot> {
        self.agents
            .iter()
            .map(|a| AgentSnapshot {
                state: a.start,
                radius: a.radius,
                parked: false,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadingMode {
    /// Face the first point of the route.
    TowardRoute,
    Absolute(f64),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Perturbation {
    /// Per-agent start offsets; missing entries mean zero.
    #[serde(default)]
    pub start_offsets: Vec<[f64; 2]>,
    #[serde(default)]
    pub heading: Option<HeadingMode>,
    #[serde(default)]
    pub speed: Option<f64>,
    #[serde(default)]
    pub goal_offsets: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("agents {0} and {1} overlap at the start")]
    AgentsOverlap(usize, usize),
    #[error("agent {0} starts inside a wall")]
    StartInWall(usize),
    #[error("goal of agent {0} is inside a wall")]
    GoalInWall(usize),
    #[error("start speed {0} outside [0, v_max]")]
    BadSpeed(f64),
}

fn doorway_walls() -> Vec<Circle> {
    let y0 = DOOR_GAP / 2.0 + WALL_RADIUS;
    let n = ((DOOR_WALL_EXTENT - y0) / WALL_SPACING).round() as usize;
    let mut walls = Vec::with_capacity(2 * (n + 1));
    for sign in [1.0, -1.0] {
        for k in 0..=n {
            walls.push(Circle::new(0.0, sign * (y0 + k as f64 * WALL_SPACING), WALL_RADIUS));
        }
    }
    walls
}

fn intersection_walls() -> Vec<Circle> {
    let o = CORRIDOR_WIDTH / 2.0 + WALL_RADIUS;
    let n = ((CORRIDOR_EXTENT - o) / WALL_SPACING).round() as usize;
    let mut walls = Vec::new();
    for sx in [1.0, -1.0] {
        for sy in [1.0, -1.0] {
            // Corner circle, then one arm along x and one along y.
            walls.push(Circle::new(sx * o, sy * o, WALL_RADIUS));
            for k in 1..=n {
                let s = o + k as f64 * WALL_SPACING;
                walls.push(Circle::new(sx * s, sy * o, WALL_RADIUS));
                walls.push(Circle::new(sx * o, sy * s, WALL_RADIUS));
            }
        }
    }
    walls
}

fn heading_to(from: Vec2, to: Vec2) -> f64 {
    let d = to - from;
    d.y.atan2(d.x)
}

fn nominal(kind: ScenarioKind) -> ScenarioSpec {
    let limits = KinodynamicLimits::default();
    let (agents, obstacles) = match kind {
        ScenarioKind::Doorway => {
            let gap = Vec2::new(0.0, 0.0);
            let make = |y: f64| {
                let p = Vec2::new(-2.0, y);
                AgentSpec {
                    start: AgentState::new(p.x, p.y, heading_to(p, gap), limits.v_max),
                    // Point-mirrored through the gap: the preferred path is straight.
                    goal: Vec2::new(2.0, -y),
                    waypoints: vec![gap],
                    radius: AGENT_RADIUS,
                }
            };
            (vec![make(0.5), make(-0.5)], doorway_walls())
        }
        ScenarioKind::Intersection => {
            let d = CORRIDOR_WIDTH / 2.0 + 1.0;
            let a = AgentSpec {
                start: AgentState::new(-d, 0.0, 0.0, limits.v_max),
                goal: Vec2::new(d, 0.0),
                waypoints: vec![],
                radius: AGENT_RADIUS,
            };
            let b = AgentSpec {
                start: AgentState::new(0.0, -d, std::f64::consts::FRAC_PI_2, limits.v_max),
                goal: Vec2::new(0.0, d),
                waypoints: vec![],
                radius: AGENT_RADIUS,
            };
            (vec![a, b], intersection_walls())
        }
    };
    ScenarioSpec {
        name: kind.to_string(),
        kind,
        agents,
        obstacles,
        limits,
        horizon: DEFAULT_HORIZON,
        goal_tolerance: DEFAULT_GOAL_TOLERANCE,
    }
}

pub fn validate(spec: &ScenarioSpec) -> Result<(), ScenarioError> {
    for (i, a) in spec.agents.iter().enumerate() {
        if !(0.0..=spec.limits.v_max).contains(&a.start.v) {
            return Err(ScenarioError::BadSpeed(a.start.v));
        }
        let p = a.start.position();
        for c in &spec.obstacles {
            if (p - c.center()).norm() < a.radius + c.radius {
                return Err(ScenarioError::StartInWall(i));
            }
            if (a.goal - c.center()).norm() < a.radius + c.radius {
                return Err(ScenarioError::GoalInWall(i));
            }
        }
        for (j, b) in spec.agents.iter().enumerate().skip(i + 1) {
            if (p - b.start.position()).norm() < a.radius + b.radius {
                return Err(ScenarioError::AgentsOverlap(i, j));
            }
        }
    }
    Ok(())
}

pub fn build_scenario(kind: ScenarioKind, perturbation: Option<&Perturbation>) -> Result<ScenarioSpec, ScenarioError> {
    let mut spec = nominal(kind);
    if let Some(p) = perturbation {
        for (i, a) in spec.agents.iter_mut().enumerate() {
            if let Some(o) = p.start_offsets.get(i) {
                a.start.x += o[0];
                a.start.y += o[1];
            }
            if let Some(o) = p.goal_offsets.get(i) {
                a.goal += Vec2::new(o[0], o[1]);
            }
            match p.heading {
                Some(HeadingMode::TowardRoute) | None => {
                    let first = a.waypoints.first().copied().unwrap_or(a.goal);
                    a.start.theta = heading_to(a.start.position(), first);
                }
                Some(HeadingMode::Absolute(t)) => a.start.theta = crate::dynamics::wrap_angle(t),
            }
            if let Some(v) = p.speed {
                a.start.v = v;
            }
        }
        spec.name = format!("{kind}/perturbed");
    }
    validate(&spec)?;
    Ok(spec)
}

/// Small seeded start-position noise, used to break exact symmetry between
/// repeated runs of the same scenario.
pub fn jittered(spec: &ScenarioSpec, seed: u64, amplitude: f64) -> ScenarioSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = spec.clone();
    for a in &mut s.agents {
        a.start.x += rng.gen_range(-amplitude..=amplitude);
        a.start.y += rng.gen_range(-amplitude..=amplitude);
    }
    s
}

/// One entry of the robustness suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub id: String,
    /// Position of the entry in the full 48-entry grid.
    pub grid_index: usize,
    pub perturbation: Perturbation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteFile {
    pub description: String,
    pub selection_seed: u64,
    pub door_wall_extent: f64,
    pub wall_radius: f64,
    pub wall_spacing: f64,
    pub entries: Vec<SuiteEntry>,
}

pub const SUITE_SIZE: usize = 28;
pub const SUITE_SELECTION_SEED: u64 = 28;
/// Suite episodes start up to 0.5 m farther out and possibly at rest, so they
/// get a longer horizon than the nominal scenarios.
pub const SUITE_HORIZON: f64 = 25.0;
const SUITE_JSON: &str = include_str!("../../data/doorway_suite.json");

/// The full doorway grid: agent-1 x offset x agent-2 y offset x heading x
/// speed x agent-1 goal offset.
pub fn suite_grid() -> Vec<SuiteEntry> {
    let mut out = Vec::new();
    for dx1 in [0.0, -0.5] {
        for dy2 in [0.0, -0.5] {
            for (hname, heading) in [("door", HeadingMode::TowardRoute), ("wall", HeadingMode::Absolute(0.0))] {
                for speed in [0.0, 0.3] {
                    for (gname, goal) in [("g0", [0.0, 0.0]), ("gy", [0.0, 0.5]), ("gx", [0.5, 0.0])] {
                        let idx = out.len();
                        out.push(SuiteEntry {
                            id: format!("s{idx:02}-x{dx1}-y{dy2}-{hname}-v{speed}-{gname}"),
                            grid_index: idx,
                            perturbation: Perturbation {
                                start_offsets: vec![[dx1, 0.0], [0.0, dy2]],
                                heading: Some(heading),
                                speed: Some(speed),
                                goal_offsets: vec![goal],
                            },
                        });
                    }
                }
            }
        }
    }
    out
}

/// Seeded selection of `SUITE_SIZE` grid entries, kept in grid order.
pub fn select_suite(seed: u64) -> Vec<SuiteEntry> {
    let grid = suite_grid();
    let mut idx: Vec<usize> = (0..grid.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut keep: Vec<usize> = idx.into_iter().take(SUITE_SIZE).collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| grid[i].clone()).collect()
}

pub fn suite_file() -> SuiteFile {
    serde_json::from_str(SUITE_JSON).expect("checked-in suite file is valid")
}

/// The 28 perturbed doorway scenarios from the checked-in suite file.
pub fn perturbation_suite() -> Vec<(String, ScenarioSpec)> {
    suite_file()
        .entries
        .into_iter()
        .map(|e| {
            let mut spec =
                build_scenario(ScenarioKind::Doorway, Some(&e.perturbation)).expect("suite entries are valid");
            spec.name = format!("doorway/{}", e.id);
            spec.horizon = SUITE_HORIZON;
            (e.id, spec)
        })
        .collect()
}
