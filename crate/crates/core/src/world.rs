//! What a controller sees at one instant: every agent's state, the static
//! circles that make up the walls, and the route an agent is asked to follow.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::dynamics::AgentState;

pub type Vec2 = Vector2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

impl Circle {
    pub fn new(x: f64, y: f64, radius: f64) -> Self {
        Self { x, y, radius }
    }

    pub fn center(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentSnapshot {
    pub state: AgentState,
    pub radius: f64,
    /// Agent has reached its goal and is parked.
    pub parked: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WorldSnapshot {
    pub agents: Vec<AgentSnapshot>,
    pub obstacles: Vec<Circle>,
}

impl WorldSnapshot {
    /// Indices of static circles whose surface lies within `range` of the
    /// ego agent's center, in the snapshot's storage order.
    pub fn visible_obstacles(&self, ego: usize, range: f64) -> Vec<usize> {
        let p = self.agents[ego].state.position();
        self.obstacles
            .iter()
            .enumerate()
            .filter(|(_, c)| (c.center() - p).norm() - c.radius <= range)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Polyline the agent is asked to follow: intermediate waypoints, then the goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub waypoints: Vec<Vec2>,
    pub goal: Vec2,
}

/// Where an agent currently is along its route.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouteProgress {
    /// Next point the agent steers for.
    pub target: Vec2,
    /// Direction of the route segment leading to `target`, radians.
    pub segment_heading: f64,
    /// Index of `target` in `waypoints ++ [goal]`.
    pub target_index: usize,
}

/// A waypoint counts as passed inside this radius, or once the agent is past
/// the line through it perpendicular to the outgoing segment.
pub const WAYPOINT_SWITCH_RADIUS: f64 = 0.1;

impl Route {
    pub fn direct(goal: Vec2) -> Self {
        Self {
            waypoints: Vec::new(),
            goal,
        }
    }

    pub fn points(&self) -> impl Iterator<Item = Vec2> + '_ {
        self.waypoints.iter().copied().chain(std::iter::once(self.goal))
    }

    pub fn translated(&self, offset: Vec2) -> Self {
        Self {
            waypoints: self.waypoints.iter().map(|w| w + offset).collect(),
            goal: self.goal + offset,
        }
    }

    /// Stateless progress: the first waypoint the agent has not yet passed.
    pub fn progress(&self, position: Vec2) -> RouteProgress {
        let pts: Vec<Vec2> = self.points().collect();
        let mut idx = pts.len() - 1;
        for k in 0..pts.len() - 1 {
            let w = pts[k];
            let out = pts[k + 1] - w;
            let rel = position - w;
            let passed = rel.norm() < WAYPOINT_SWITCH_RADIUS || rel.dot(&out) > 0.0;
            if !passed {
                idx = k;
                break;
            }
        }
        let target = pts[idx];
        let seg = if idx == 0 {
            target - position
        } else {
            target - pts[idx - 1]
        };
        let segment_heading = if seg.norm() > 1e-12 { seg.y.atan2(seg.x) } else { 0.0 };
        RouteProgress {
            target,
            segment_heading,
            target_index: idx,
        }
    }

    /// Point at arc length `ahead` past the projection of `position` onto the
    /// remaining route. Saturates at the goal.
    pub fn carrot(&self, position: Vec2, ahead: f64) -> Vec2 {
        let prog = self.progress(position);
        let pts: Vec<Vec2> = self.points().collect();
        // Project onto the active segment first.
        let (start, mut remaining) = if prog.target_index == 0 {
            (position, ahead)
        } else {
            let a = pts[prog.target_index - 1];
            let b = pts[prog.target_index];
            let ab = b - a;
            let len2 = ab.norm_squared();
            let t = if len2 > 0.0 {
                ((position - a).dot(&ab) / len2).clamp(0.0, 1.0)
            } else {
                1.0
            };
            (a + ab * t, ahead)
        };
        let mut cur = start;
        for p in pts.iter().skip(prog.target_index) {
            let seg = p - cur;
            let len = seg.norm();
            if len >= remaining {
                return cur + seg * (remaining / len);
            }
            remaining -= len;
            cur = *p;
        }
        self.goal
    }
}
