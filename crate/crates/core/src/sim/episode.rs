//! Lockstep episodes and their logs.

use std::io::{self, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbf::{liveness_geometry, ObstacleView};
use crate::dynamics::{integrate_step, AgentState, ControlInput, KinodynamicLimits};
use crate::qpdiff::QpStatus;
use crate::world::{AgentSnapshot, Circle, Route, WorldSnapshot};

use super::scenario::ScenarioSpec;

/// Below this speed an off-goal agent counts as stopped.
pub const DEADLOCK_SPEED: f64 = 0.01;
/// Trailing window the agent must stay stopped for.
pub const DEADLOCK_WINDOW: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlDecision {
    pub control: ControlInput,
    /// Status of the controller's own optimization, if it has one.
    pub status: Option<QpStatus>,
}

impl ControlDecision {
    pub fn plain(control: ControlInput) -> Self {
        Self { control, status: None }
    }
}

pub trait Controller {
    fn name(&self) -> &str;
    fn control(
        &mut self,
        snapshot: &WorldSnapshot,
        ego: usize,
        route: &Route,
        limits: &KinodynamicLimits,
    ) -> ControlDecision;
}

/// Always outputs `(0, 0)`.
pub struct HoldController;

impl Controller for HoldController {
    fn name(&self) -> &str {
        "hold"
    }
    fn control(&mut self, _: &WorldSnapshot, _: usize, _: &Route, _: &KinodynamicLimits) -> ControlDecision {
        ControlDecision::plain(ControlInput::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    /// State at the start of the step.
    pub state: AgentState,
    pub control: ControlInput,
    /// Smallest `|dp|^2 - (r_i + r_j)^2` over walls and other agents.
    pub min_barrier: f64,
    /// `delta (t_j - t_i)` against the other agent, when the rays cross.
    pub liveness_barrier: Option<f64>,
    pub status: Option<QpStatus>,
    pub parked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub agents: Vec<AgentRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub collision: bool,
    /// Time of the first colliding state.
    pub collision_time: Option<f64>,
    pub goal_times: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub scenario: String,
    pub controllers: Vec<String>,
    pub dt: f64,
    pub horizon: f64,
    pub steps: Vec<StepRecord>,
    /// States after the last step.
    pub terminal: Vec<AgentState>,
    /// Barrier values of the terminal states.
    pub terminal_min_barrier: Vec<f64>,
    pub outcome: EpisodeOutcome,
    /// Wall-clock seconds per controller call, per agent. Not part of the
    /// deterministic record.
    #[serde(skip)]
    pub cycle_times: Vec<Vec<f64>>,
}

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("controller for agent {agent} panicked at step {step}: {message}")]
    ControllerPanic { agent: usize, step: usize, message: String },
    #[error("expected {expected} controllers, got {got}")]
    ControllerCount { expected: usize, got: usize },
}

fn barrier(a: &AgentSnapshot, c: &Circle) -> f64 {
    let r = a.radius + c.radius;
    (a.state.position() - c.center()).norm_squared() - r * r
}

/// Minimum barrier per agent over walls and all other agents.
pub fn min_barriers(world: &WorldSnapshot) -> Vec<f64> {
    world
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let walls = world.obstacles.iter().map(|c| barrier(a, c));
            let others = world.agents.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, b)| {
                let r = a.radius + b.radius;
                (a.state.position() - b.state.position()).norm_squared() - r * r
            });
            walls.chain(others).fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Any pair of agents, or an agent and a wall circle, strictly overlapping.
/// Touching is safe.
pub fn detect_collision(world: &WorldSnapshot) -> bool {
    for (i, a) in world.agents.iter().enumerate() {
        let p = a.state.position();
        if world
            .obstacles
            .iter()
            .any(|c| (p - c.center()).norm() < a.radius + c.radius)
        {
            return true;
        }
        for b in world.agents.iter().skip(i + 1) {
            if (p - b.state.position()).norm() < a.radius + b.radius {
                return true;
            }
        }
    }
    false
}

impl TrajectoryLog {
    /// Speed history of one agent, terminal state included.
    pub fn speeds(&self, agent: usize) -> Vec<f64> {
        self.steps
            .iter()
            .map(|s| s.agents[agent].state.v)
            .chain(std::iter::once(self.terminal[agent].v))
            .collect()
    }

    pub fn positions(&self, agent: usize) -> Vec<crate::world::Vec2> {
        self.steps
            .iter()
            .map(|s| s.agents[agent].state.position())
            .chain(std::iter::once(self.terminal[agent].position()))
            .collect()
    }

    pub fn num_agents(&self) -> usize {
        self.terminal.len()
    }

    pub fn all_reached(&self) -> bool {
        self.outcome.goal_times.iter().all(|g| g.is_some())
    }

    /// Smallest barrier value over every logged state.
    pub fn min_barrier(&self) -> f64 {
        self.steps
            .iter()
            .flat_map(|s| s.agents.iter().map(|a| a.min_barrier))
            .chain(self.terminal_min_barrier.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn all_optimal(&self) -> bool {
        self.steps
            .iter()
            .flat_map(|s| s.agents.iter())
            .all(|a| a.parked || matches!(a.status, None | Some(QpStatus::Optimal)))
    }

    pub const CSV_HEADER: &'static str =
        "step,t,agent,x,y,theta,v,omega,a,min_barrier,liveness_barrier,qp_status,parked";

    /// One row per agent-step with the columns of [`Self::CSV_HEADER`]; the
    /// terminal states follow as a final step with zero control.
    pub fn write_csv(&self, w: &mut impl Write) -> io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        let status = |s: Option<QpStatus>| match s {
            None => "",
            Some(QpStatus::Optimal) => "optimal",
            Some(QpStatus::Relaxed) => "relaxed",
            Some(QpStatus::Infeasible) => "infeasible",
        };
        for s in &self.steps {
            for (i, a) in s.agents.iter().enumerate() {
                let live = a.liveness_barrier.map(|b| b.to_string()).unwrap_or_default();
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    s.step,
                    s.t,
                    i,
                    a.state.x,
                    a.state.y,
                    a.state.theta,
                    a.state.v,
                    a.control.omega,
                    a.control.a,
                    a.min_barrier,
                    live,
                    status(a.status),
                    a.parked as u8
                )?;
            }
        }
        let n = self.steps.len();
        for (i, st) in self.terminal.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},0,0,{},,,{}",
                n,
                n as f64 * self.dt,
                i,
                st.x,
                st.y,
                st.theta,
                st.v,
                self.terminal_min_barrier[i],
                self.outcome.goal_times[i].is_some() as u8
            )?;
        }
        Ok(())
    }
}

/// World as agents see it: parked agents report zero speed.
fn snapshot(states: &[AgentState], spec: &ScenarioSpec, parked: &[bool]) -> WorldSnapshot {
    WorldSnapshot {
        agents: states
            .iter()
            .zip(spec.agents.iter())
            .zip(parked.iter())
            .map(|((s, a), p)| AgentSnapshot {
                state: if *p { AgentState { v: 0.0, ..*s } } else { *s },
                radius: a.radius,
                parked: *p,
            })
            .collect(),
        obstacles: spec.obstacles.clone(),
    }
}

/// The world as the controllers saw it at a logged step.
pub fn step_snapshot(spec: &ScenarioSpec, step: &StepRecord) -> WorldSnapshot {
    let states: Vec<AgentState> = step.agents.iter().map(|a| a.state).collect();
    let parked: Vec<bool> = step.agents.iter().map(|a| a.parked).collect();
    snapshot(&states, spec, &parked)
}

fn liveness_value(world: &WorldSnapshot, ego: usize) -> Option<f64> {
    let me = &world.agents[ego];
    world
        .agents
        .iter()
        .enumerate()
        .filter(|(j, a)| *j != ego && !a.parked)
        .find_map(|(_, o)| liveness_geometry(&me.state, me.radius, &ObstacleView::moving(&o.state, o.radius)))
        .map(|g| g.barrier())
}

fn panic_message(e: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = e.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = e.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic".into()
    }
}

/// Runs all agents in lockstep until every agent is parked at its goal, the
/// first collision, or the horizon.
pub fn run_episode(
    spec: &ScenarioSpec,
    controllers: &mut [Box<dyn Controller + '_>],
) -> Result<TrajectoryLog, EpisodeError> {
    let n = spec.agents.len();
    if controllers.len() != n {
        return Err(EpisodeError::ControllerCount {
            expected: n,
            got: controllers.len(),
        });
    }
    let routes: Vec<Route> = spec.agents.iter().map(|a| a.route()).collect();
    let mut states: Vec<AgentState> = spec.agents.iter().map(|a| a.start).collect();
    let mut parked = vec![false; n];
    let mut goal_times = vec![None; n];
    let mut cycle_times = vec![Vec::new(); n];
    let mut steps = Vec::with_capacity(spec.max_steps());
    let mut collision_time = None;
    let dt = spec.limits.dt;

    let initial = snapshot(&states, spec, &parked);
    if detect_collision(&initial) {
        collision_time = Some(0.0);
    }

    for step in 0..spec.max_steps() {
        if collision_time.is_some() || parked.iter().all(|p| *p) {
            break;
        }
        let world = snapshot(&states, spec, &parked);
        let barriers = min_barriers(&world);
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let decision = if parked[i] {
                ControlDecision::plain(ControlInput::default())
            } else {
                let ctl = &mut controllers[i];
                let t0 = Instant::now();
                let d = catch_unwind(AssertUnwindSafe(|| ctl.control(&world, i, &routes[i], &spec.limits)));
                cycle_times[i].push(t0.elapsed().as_secs_f64());
                d.map_err(|e| {
                    let message = panic_message(e);
                    log::error!("agent {i} controller panicked at step {step}: {message}");
                    EpisodeError::ControllerPanic {
                        agent: i,
                        step,
                        message,
                    }
                })?
            };
            records.push(AgentRecord {
                state: states[i],
                control: decision.control,
                min_barrier: barriers[i],
                liveness_barrier: if parked[i] { None } else { liveness_value(&world, i) },
                status: decision.status,
                parked: parked[i],
            });
        }
        for i in 0..n {
            if !parked[i] {
                states[i] = integrate_step(&states[i], &records[i].control, &spec.limits);
            }
        }
        steps.push(StepRecord {
            step,
            t: step as f64 * dt,
            agents: records,
        });
        let t_next = (step + 1) as f64 * dt;
        for i in 0..n {
            if !parked[i] && (states[i].position() - spec.agents[i].goal).norm() <= spec.goal_tolerance {
                parked[i] = true;
                goal_times[i] = Some(t_next);
            }
        }
        if detect_collision(&snapshot(&states, spec, &parked)) {
            collision_time = Some(t_next);
        }
    }

    let terminal_world = snapshot(&states, spec, &parked);
    Ok(TrajectoryLog {
        scenario: spec.name.clone(),
        controllers: controllers.iter().map(|c| c.name().to_string()).collect(),
        dt,
        horizon: spec.horizon,
        steps,
        terminal_min_barrier: min_barriers(&terminal_world),
        terminal: states,
        outcome: EpisodeOutcome {
            collision: collision_time.is_some(),
            collision_time,
            goal_times,
        },
        cycle_times,
    })
}

/// Some agent is off-goal at the end of a full-horizon episode and stayed
/// below `DEADLOCK_SPEED` for the trailing `DEADLOCK_WINDOW`.
pub fn detect_deadlock(log: &TrajectoryLog) -> bool {
    if log.outcome.collision {
        return false;
    }
    let window = (DEADLOCK_WINDOW / log.dt).round() as usize;
    (0..log.num_agents()).any(|i| {
        if log.outcome.goal_times[i].is_some() {
            return false;
        }
        let v = log.speeds(i);
        v.len() > window && v[v.len() - 1 - window..].iter().all(|s| *s < DEADLOCK_SPEED)
    })
}
