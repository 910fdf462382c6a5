//! One LiveNet control cycle: encode, predict, build the barrier rows with the
//! predicted penalties, project through the QP.

use serde::{Deserialize, Serialize};

use crate::cbf::{
    build_all_rows, ConstraintRow, ObstacleView, PenaltyValues, RowKind, RowOptions, SourceId, ViewEntry,
};
use crate::dynamics::{clamp_control, ControlInput, KinodynamicLimits};
use crate::qpdiff::{solve_qp, QpProblem, QpResult, QpStatus};
use crate::sim::{ControlDecision, Controller};
use crate::world::{Route, WorldSnapshot};

use super::encoding::{encode_observation, EncodingConfig, ModelInput};
use super::network::{forward_cached, ForwardCache, NetworkParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    /// `false` drops the liveness rows (obstacle rows only).
    pub liveness: bool,
    /// Static circles whose surface is farther than this are ignored.
    pub sensing_range: f64,
    /// Added to the ego radius inside the barrier rows only, to absorb the
    /// gap between the continuous-time condition and the Euler step.
    pub radius_margin: f64,
    pub encoding: EncodingConfig,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            liveness: true,
            sensing_range: 1.0,
            radius_margin: 0.01,
            encoding: EncodingConfig::default(),
        }
    }
}

/// Ego's local view: visible static circles plus every other agent. Parked
/// agents are treated as static circles.
pub fn local_view(snapshot: &WorldSnapshot, ego: usize, sensing_range: f64) -> Vec<ViewEntry> {
    let mut view: Vec<ViewEntry> = snapshot
        .visible_obstacles(ego, sensing_range)
        .into_iter()
        .map(|i| {
            let c = &snapshot.obstacles[i];
            ViewEntry {
                obstacle: ObstacleView::stationary(c.x, c.y, c.radius),
                source: SourceId::Static(i),
                is_agent: false,
            }
        })
        .collect();
    for (j, a) in snapshot.agents.iter().enumerate() {
        if j == ego {
            continue;
        }
        let obstacle = if a.parked {
            ObstacleView::stationary(a.state.x, a.state.y, a.radius)
        } else {
            ObstacleView::moving(&a.state, a.radius)
        };
        view.push(ViewEntry {
            obstacle,
            source: SourceId::Agent(j),
            is_agent: !a.parked,
        });
    }
    view
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub control: ControlInput,
    pub u_ref: ControlInput,
    pub penalties: PenaltyValues,
    /// Rows of the problem that was finally solved.
    pub rows: Vec<ConstraintRow>,
    pub qp: QpResult,
    /// The liveness rows conflicted with the others and were left out.
    pub liveness_dropped: bool,
}

impl StepOutput {
    /// A step that had to give up its liveness rows counts as relaxed.
    pub fn status(&self) -> QpStatus {
        match self.qp.status {
            QpStatus::Optimal if self.liveness_dropped => QpStatus::Relaxed,
            s => s,
        }
    }
}

/// Everything needed to differentiate a step, as produced by [`step_from_input`].
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub output: StepOutput,
    pub cache: ForwardCache,
    pub problem: QpProblem,
}

pub fn emergency_brake(limits: &KinodynamicLimits) -> ControlInput {
    ControlInput::new(0.0, -limits.a_max)
}

/// Step from an already-encoded input and a prebuilt view.
pub fn step_from_input(
    params: &NetworkParams,
    input: &ModelInput,
    snapshot: &WorldSnapshot,
    ego: usize,
    view: &[ViewEntry],
    limits: &KinodynamicLimits,
    config: &ControllerConfig,
) -> StepTrace {
    let (out, cache) = forward_cached(params, input.as_slice());
    let me = &snapshot.agents[ego];
    let rows = build_all_rows(
        &me.state,
        me.radius + config.radius_margin,
        view,
        &out.penalties,
        limits,
        RowOptions {
            liveness: config.liveness,
        },
    );
    let mut problem = QpProblem::new(out.u_ref.as_vector(), rows);
    let mut qp = solve_qp(&problem);
    let mut liveness_dropped = false;
    // Safety outranks liveness: if the rows conflict, drop the liveness rows
    // before letting the relaxation soften obstacle rows.
    if qp.status != QpStatus::Optimal && problem.rows.iter().any(|r| r.kind == RowKind::Liveness) {
        let rows = problem
            .rows
            .iter()
            .filter(|r| r.kind != RowKind::Liveness)
            .cloned()
            .collect();
        let reduced = QpProblem::new(out.u_ref.as_vector(), rows);
        let res = solve_qp(&reduced);
        if res.status != QpStatus::Infeasible {
            problem = reduced;
            qp = res;
            liveness_dropped = true;
        }
    }
    let control = if qp.status == QpStatus::Infeasible {
        log::warn!("agent {ego}: QP infeasible after relaxation, braking");
        emergency_brake(limits)
    } else {
        clamp_control(&ControlInput::from_vector(&qp.u_star), limits)
    };
    StepTrace {
        output: StepOutput {
            control,
            u_ref: out.u_ref,
            penalties: out.penalties,
            rows: problem.rows.clone(),
            qp,
            liveness_dropped,
        },
        cache,
        problem,
    }
}

pub fn controller_step(
    params: &NetworkParams,
    snapshot: &WorldSnapshot,
    ego: usize,
    route: &Route,
    limits: &KinodynamicLimits,
    config: &ControllerConfig,
) -> StepOutput {
    let input = encode_observation(snapshot, ego, route, limits, &config.encoding);
    let view = local_view(snapshot, ego, config.sensing_range);
    step_from_input(params, &input, snapshot, ego, &view, limits, config).output
}

/// LiveNet as a simulator controller.
pub struct LiveNetController {
    pub params: std::sync::Arc<NetworkParams>,
    pub config: ControllerConfig,
}

impl LiveNetController {
    pub fn new(params: std::sync::Arc<NetworkParams>, config: ControllerConfig) -> Self {
        Self { params, config }
    }
}

impl Controller for LiveNetController {
    fn name(&self) -> &str {
        if self.config.liveness {
            "livenet"
        } else {
            "livenet-no-liveness"
        }
    }

    fn control(
        &mut self,
        snapshot: &WorldSnapshot,
        ego: usize,
        route: &Route,
        limits: &KinodynamicLimits,
    ) -> ControlDecision {
        let out = controller_step(&self.params, snapshot, ego, route, limits, &self.config);
        ControlDecision {
            control: out.control,
            status: Some(out.status()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cbf::RowKind;
    use crate::dynamics::AgentState;
    use crate::policy::network::{NetworkShape, HEAD_R};
    use crate::world::{AgentSnapshot, Circle, Vec2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn agent(x: f64, y: f64, th: f64, v: f64) -> AgentSnapshot {
        AgentSnapshot {
            state: AgentState::new(x, y, th, v),
            radius: 0.1,
            parked: false,
        }
    }

    /// Zero trunk, constant reference output and penalties.
    fn constant_params(u: (f64, f64), p_o: f64, p_l: f64) -> NetworkParams {
        let mut params = NetworkParams::zeros(NetworkShape::new(EncodingConfig::default().input_dim()));
        params.heads[HEAD_R].b2[0] = u.0;
        params.heads[HEAD_R].b2[1] = u.1;
        params.heads[1].b2.fill(super::super::network::penalty_preimage(p_o));
        params.heads[2].b2.fill(super::super::network::penalty_preimage(p_l));
        params
    }

    #[test]
    fn empty_world_passes_reference_through() {
        let params = constant_params((0.2, 0.05), 1.0, 1.0);
        let w = WorldSnapshot {
            agents: vec![agent(0.0, 0.0, 0.0, 0.2)],
            obstacles: vec![],
        };
        let out = controller_step(
            &params,
            &w,
            0,
            &Route::direct(Vec2::new(3.0, 0.0)),
            &Default::default(),
            &Default::default(),
        );
        assert_eq!(out.control, ControlInput::new(0.2, 0.05));
        assert_eq!(out.status(), QpStatus::Optimal);
    }

    #[test]
    fn yielding_agent_brakes() {
        let params = constant_params((0.0, 0.1), 3.0, 0.5);
        // Perpendicular approach; ego is farther from the crossing.
        let w = WorldSnapshot {
            agents: vec![
                agent(-1.2, 0.0, 0.0, 0.3),
                agent(0.0, -0.9, std::f64::consts::FRAC_PI_2, 0.3),
            ],
            obstacles: vec![],
        };
        let lim = KinodynamicLimits::default();
        let out = controller_step(
            &params,
            &w,
            0,
            &Route::direct(Vec2::new(2.0, 0.0)),
            &lim,
            &Default::default(),
        );
        let live = out
            .rows
            .iter()
            .find(|r| r.kind == RowKind::Liveness)
            .expect("liveness row");
        assert!(live.g[1] > 0.0 && live.h < 0.0);
        assert!(out.control.a <= live.h / live.g[1] + 1e-12);
        assert!(out.control.a < 0.0);

        let cfg = ControllerConfig {
            liveness: false,
            ..Default::default()
        };
        let out = controller_step(&params, &w, 0, &Route::direct(Vec2::new(2.0, 0.0)), &lim, &cfg);
        assert!(out.rows.iter().all(|r| r.kind != RowKind::Liveness));
        assert_eq!(out.control.a, 0.1);
    }

    #[test]
    fn obstacle_ahead_row_holds() {
        // p = 1.5 puts the row at a <= ~0.05: active but feasible.
        let params = constant_params((0.0, 0.1), 1.5, 1.0);
        let w = WorldSnapshot {
            agents: vec![agent(0.0, 0.0, 0.0, 0.3)],
            obstacles: vec![Circle::new(0.8, 0.0, 0.1)],
        };
        let out = controller_step(
            &params,
            &w,
            0,
            &Route::direct(Vec2::new(3.0, 0.0)),
            &Default::default(),
            &Default::default(),
        );
        assert_eq!(out.status(), QpStatus::Optimal);
        for r in &out.rows {
            assert!(r.residual(&out.control.as_vector()) <= 1e-9);
        }
        assert!(out.control.a < 0.1);
    }

    #[test]
    fn random_params_never_override_obstacle_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let lim = KinodynamicLimits::default();
        let shape = NetworkShape {
            input: EncodingConfig::default().input_dim(),
            trunk: 32,
            head: 16,
        };
        for _ in 0..300 {
            let mut params = NetworkParams::init(shape, &lim, 3.0, 1.0, &mut rng);
            for h in &mut params.heads {
                h.w2 *= rng.gen_range(1.0..50.0);
            }
            let w = WorldSnapshot {
                agents: vec![
                    agent(
                        rng.gen_range(-1.0..-0.3),
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(0.0..0.3),
                    ),
                    agent(
                        rng.gen_range(0.3..1.0),
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(0.0..0.3),
                    ),
                ],
                obstacles: (0..5).map(|k| Circle::new(0.0, 0.25 + 0.1 * k as f64, 0.1)).collect(),
            };
            let out = controller_step(
                &params,
                &w,
                0,
                &Route::direct(Vec2::new(2.0, 0.0)),
                &lim,
                &Default::default(),
            );
            let u = out.control;
            assert!(u.omega.abs() <= lim.omega_max && u.a.abs() <= lim.a_max);
            if out.status() == QpStatus::Optimal {
                for r in out.rows.iter().filter(|r| r.kind == RowKind::Obstacle) {
                    assert!(r.residual(&u.as_vector()) <= 1e-9 * (1.0 + r.h.abs()));
                }
            }
        }
    }
}
