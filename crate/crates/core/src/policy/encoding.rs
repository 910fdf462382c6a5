//! Ego-frame observation vector.
//!
//! Layout, for `k` obstacle slots:
//!
//! | offset | width | content |
//! |---|---|---|
//! | 0 | 6 | target distance, target bearing (sin, cos), route heading error (sin, cos), speed / v_max |
//! | 6 | 7 | nearest other agent: present, x, y (ego frame), distance, relative heading (sin, cos), speed / v_max |
//! | 13 | 3 | liveness against that agent: present, delta, (t_j - t_i) / 5 s clamped to [-1, 1] |
//! | 16 | 3k | nearest static circles: present, x, y (ego frame) |
//!
//! All positions are expressed in the ego frame, so the encoding is invariant
//! to translating or rotating the whole world.

use serde::{Deserialize, Serialize};

use crate::cbf::{liveness_geometry, ObstacleView};
use crate::dynamics::KinodynamicLimits;
use crate::world::{Route, Vec2, WorldSnapshot};

pub const EGO_FEATURES: usize = 6;
pub const AGENT_FEATURES: usize = 7;
pub const LIVENESS_FEATURES: usize = 3;
pub const OBSTACLE_FEATURES: usize = 3;
/// Arrival-time gap (s) that saturates the liveness feature.
pub const LIVENESS_GAP_SCALE: f64 = 5.0;
pub const DEFAULT_OBSTACLE_SLOTS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub obstacle_slots: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            obstacle_slots: DEFAULT_OBSTACLE_SLOTS,
        }
    }
}

impl EncodingConfig {
    pub fn input_dim(&self) -> usize {
        EGO_FEATURES + AGENT_FEATURES + LIVENESS_FEATURES + OBSTACLE_FEATURES * self.obstacle_slots
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput(pub Vec<f64>);

impl ModelInput {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn to_ego(rel: Vec2, theta: f64) -> Vec2 {
    let (s, c) = theta.sin_cos();
    Vec2::new(c * rel.x + s * rel.y, -s * rel.x + c * rel.y)
}

pub fn encode_observation(
    snapshot: &WorldSnapshot,
    ego: usize,
    route: &Route,
    limits: &KinodynamicLimits,
    config: &EncodingConfig,
) -> ModelInput {
    let me = &snapshot.agents[ego];
    let st = me.state;
    let p = st.position();
    let mut out = Vec::with_capacity(config.input_dim());

    let prog = route.progress(p);
    let rel = to_ego(prog.target - p, st.theta);
    let dist = rel.norm();
    let (sb, cb) = if dist > 1e-9 {
        (rel.y / dist, rel.x / dist)
    } else {
        (0.0, 1.0)
    };
    let (sh, ch) = if dist > 1e-9 {
        (prog.segment_heading - st.theta).sin_cos()
    } else {
        (0.0, 1.0)
    };
    out.extend_from_slice(&[dist, sb, cb, sh, ch, st.v / limits.v_max]);

    let nearest = snapshot
        .agents
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != ego)
        .map(|(i, a)| ((a.state.position() - p).norm(), i))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    match nearest {
        Some((d, i)) => {
            let o = &snapshot.agents[i].state;
            let r = to_ego(o.position() - p, st.theta);
            let (s, c) = (o.theta - st.theta).sin_cos();
            out.extend_from_slice(&[1.0, r.x, r.y, d, s, c, o.v / limits.v_max]);
            let other = &snapshot.agents[i];
            let geo = (!other.parked)
                .then(|| liveness_geometry(&st, me.radius, &ObstacleView::moving(&other.state, other.radius)))
                .flatten();
            match geo {
                Some(g) => {
                    let gap = ((g.t_j - g.t_i) / LIVENESS_GAP_SCALE).clamp(-1.0, 1.0);
                    out.extend_from_slice(&[1.0, g.delta, gap]);
                }
                None => out.extend_from_slice(&[0.0; LIVENESS_FEATURES]),
            }
        }
        None => out.extend_from_slice(&[0.0; AGENT_FEATURES + LIVENESS_FEATURES]),
    }

    let mut obs: Vec<(f64, usize)> = snapshot
        .obstacles
        .iter()
        .enumerate()
        .map(|(i, c)| ((c.center() - p).norm(), i))
        .collect();
    obs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for slot in 0..config.obstacle_slots {
        match obs.get(slot) {
            Some(&(_, i)) => {
                let r = to_ego(snapshot.obstacles[i].center() - p, st.theta);
                out.extend_from_slice(&[1.0, r.x, r.y]);
            }
            None => out.extend_from_slice(&[0.0; OBSTACLE_FEATURES]),
        }
    }
    debug_assert_eq!(out.len(), config.input_dim());
    ModelInput(out)
}
