//! Receding-horizon MPC with discrete-time obstacle and liveness barriers.
//!
//! Each plan is a short SQP: roll out the current control guess, linearize the
//! unicycle around it, condense the states out and solve one dense QP over
//! the stacked control corrections plus a shared barrier slack.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::cbf::{liveness_geometry, ObstacleView, V_FLOOR};
use crate::dynamics::{clamp_control, wrap_angle, AgentState, ControlInput, KinodynamicLimits};
use crate::qpdiff::{DenseQp, QpError, QpStatus};
use crate::sim::{ControlDecision, Controller};
use crate::world::{Route, Vec2, WorldSnapshot};

/// Liveness rows are dropped once a planned speed falls below this.
pub const LIVENESS_MIN_SPEED: f64 = 0.02;
const MERIT_WEIGHT: f64 = 1e3;
const PLAN_SLACK_WEIGHT: f64 = 1e5;
const PLAN_SLACK_LINEAR: f64 = 1e3;
const WALL_SLACK_SCALE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    /// Number of predicted states, including the current one.
    pub horizon: usize,
    pub q: [f64; 4],
    pub q_terminal: [f64; 4],
    pub r: [f64; 2],
    pub gamma_obstacle: f64,
    /// Decay rate for barriers against other agents, whose motion is only
    /// predicted.
    pub gamma_agent: f64,
    pub gamma_liveness: f64,
    pub liveness: bool,
    /// Arrival-time lag, s, the yielding agent is driven towards.
    pub yield_lag: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Static circles whose surface is within this range are constrained.
    pub obstacle_range: f64,
    pub radius_margin: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            q: [10.0, 10.0, 1.0, 1.0],
            q_terminal: [10.0, 10.0, 1.0, 1.0],
            r: [1.0, 1.0],
            gamma_obstacle: 0.3,
            gamma_agent: 0.3,
            gamma_liveness: 0.2,
            liveness: true,
            yield_lag: 2.0,
            max_iterations: 6,
            tolerance: 1e-4,
            obstacle_range: 0.8,
            radius_margin: 0.01,
        }
    }
}

impl MpcConfig {
    pub fn controls(&self) -> usize {
        self.horizon.saturating_sub(1).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcPlan {
    pub controls: Vec<ControlInput>,
    /// Predicted states, `controls.len() + 1` of them.
    pub states: Vec<AgentState>,
    pub slack: f64,
    /// Largest barrier violation of the nonlinear rollout.
    pub violation: f64,
    pub cost: f64,
    pub iterations: usize,
}

impl MpcPlan {
    pub fn status(&self) -> QpStatus {
        if self.slack > 1e-6 || self.violation > 1e-9 {
            QpStatus::Relaxed
        } else {
            QpStatus::Optimal
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MpcError {
    #[error("plan subproblem failed: {0}")]
    Solver(#[from] QpError),
    #[error("non-finite plan")]
    NonFinite,
}

/// Obstacle predicted at constant velocity.
#[derive(Debug, Clone, Copy)]
struct Predicted {
    p0: Vec2,
    vel: Vec2,
    radius: f64,
    agent: bool,
}

impl Predicted {
    fn at(&self, k: usize, dt: f64) -> Vec2 {
        self.p0 + self.vel * (k as f64 * dt)
    }
}

/// Liveness data frozen at plan time.
#[derive(Debug, Clone, Copy)]
struct LiveTarget {
    c: Vec2,
    delta: f64,
    t_j0: f64,
    lag: f64,
    /// Center-to-critical-point offset along the line to `c`, so the time
    /// at plan time matches the geometry's.
    offset: f64,
}

impl LiveTarget {
    fn t_j(&self, k: usize, dt: f64) -> f64 {
        self.t_j0 - k as f64 * dt
    }

    /// Barrier value and gradient with respect to the state, if defined.
    fn eval(&self, s: &AgentState, k: usize, dt: f64) -> Option<(f64, [f64; 4])> {
        let p = s.position();
        let rel = self.c - p;
        let dc = rel.norm();
        let d = dc - self.offset;
        if s.v < LIVENESS_MIN_SPEED || dc < 1e-3 || d <= 0.0 || rel.dot(&s.heading()) <= 0.0 {
            return None;
        }
        let t_i = d / s.v;
        let b = self.delta * (self.t_j(k, dt) - t_i);
        // d t_i / dp = (p - c) / (|c - p| v), d t_i / dv = -d / v^2
        let gx = -self.delta * (-rel.x) / (dc * s.v);
        let gy = -self.delta * (-rel.y) / (dc * s.v);
        let gv = self.delta * d / (s.v * s.v);
        Some((b, [gx, gy, 0.0, gv]))
    }
}

fn rollout(x0: &AgentState, u: &[ControlInput], dt: f64) -> Vec<AgentState> {
    let mut xs = Vec::with_capacity(u.len() + 1);
    xs.push(*x0);
    for c in u {
        let s = xs.last().unwrap();
        xs.push(AgentState {
            x: s.x + dt * s.v * s.theta.cos(),
            y: s.y + dt * s.v * s.theta.sin(),
            theta: s.theta + dt * c.omega,
            v: s.v + dt * c.a,
        });
    }
    xs
}

struct Reference {
    /// `(x, y, theta, v)` for steps `1..=M`.
    states: Vec<[f64; 4]>,
    /// Zero where the reference heading is undefined (at the goal).
    heading_weight: Vec<f64>,
}

fn reference(x0: &AgentState, route: &Route, limits: &KinodynamicLimits, m: usize) -> Reference {
    let p0 = x0.position();
    let step = limits.v_max * limits.dt;
    let mut prev = route.carrot(p0, 0.0);
    let mut heading = x0.theta;
    let mut states = Vec::with_capacity(m);
    let mut heading_weight = Vec::with_capacity(m);
    for k in 1..=m {
        let p = route.carrot(p0, step * k as f64);
        let seg = p - prev;
        let len = seg.norm();
        let w = if len > 1e-9 {
            heading = seg.y.atan2(seg.x);
            1.0
        } else {
            0.0
        };
        states.push([p.x, p.y, heading, (len / limits.dt).min(limits.v_max)]);
        heading_weight.push(w);
        prev = p;
    }
    Reference { states, heading_weight }
}

struct Problem<'a> {
    x0: AgentState,
    radius: f64,
    obstacles: Vec<Predicted>,
    live: Vec<LiveTarget>,
    reference: Reference,
    limits: &'a KinodynamicLimits,
    config: &'a MpcConfig,
}

impl Problem<'_> {
    fn m(&self) -> usize {
        self.reference.states.len()
    }

    fn q_at(&self, k: usize) -> [f64; 4] {
        let mut q = if k == self.m() {
            self.config.q_terminal
        } else {
            self.config.q
        };
        q[2] *= self.reference.heading_weight[k - 1];
        q
    }

    fn error(&self, s: &AgentState, k: usize) -> [f64; 4] {
        let r = &self.reference.states[k - 1];
        [s.x - r[0], s.y - r[1], wrap_angle(s.theta - r[2]), s.v - r[3]]
    }

    fn cost(&self, u: &[ControlInput], xs: &[AgentState]) -> f64 {
        let mut j = 0.0;
        for k in 1..=self.m() {
            let e = self.error(&xs[k], k);
            let q = self.q_at(k);
            j += 0.5 * (0..4).map(|i| q[i] * e[i] * e[i]).sum::<f64>();
        }
        for c in u {
            j += 0.5 * (self.config.r[0] * c.omega * c.omega + self.config.r[1] * c.a * c.a);
        }
        j
    }

    fn gamma(&self, o: &Predicted) -> f64 {
        if o.agent {
            self.config.gamma_agent
        } else {
            self.config.gamma_obstacle
        }
    }

    fn obstacle_barrier(&self, o: &Predicted, s: &AgentState, k: usize) -> (f64, [f64; 4]) {
        let d = s.position() - o.at(k, self.limits.dt);
        let rr = self.radius + o.radius;
        (d.norm_squared() - rr * rr, [2.0 * d.x, 2.0 * d.y, 0.0, 0.0])
    }

    /// Largest violation of the nonlinear barrier and speed conditions.
    fn violation(&self, xs: &[AgentState]) -> f64 {
        let gl = self.config.gamma_liveness;
        let dt = self.limits.dt;
        let mut worst: f64 = 0.0;
        for s in &xs[1..] {
            worst = worst.max(-s.v).max(s.v - self.limits.v_max);
        }
        for o in &self.obstacles {
            let g = self.gamma(o);
            for k in 1..self.m() {
                let (b0, _) = self.obstacle_barrier(o, &xs[k], k);
                let (b1, _) = self.obstacle_barrier(o, &xs[k + 1], k + 1);
                worst = worst.max((1.0 - g) * b0 - b1);
            }
        }
        for lt in &self.live {
            for k in 0..self.m() {
                if lt.t_j(k + 1, dt) <= 0.0 {
                    break;
                }
                if let (Some((b0, _)), Some((b1, _))) = (lt.eval(&xs[k], k, dt), lt.eval(&xs[k + 1], k + 1, dt)) {
                    worst = worst.max(gl * lt.lag + (1.0 - gl) * b0 - b1);
                }
            }
        }
        worst
    }

    fn merit(&self, u: &[ControlInput]) -> (f64, Vec<AgentState>, f64) {
        let xs = rollout(&self.x0, u, self.limits.dt);
        let v = self.violation(&xs);
        (self.cost(u, &xs) + MERIT_WEIGHT * v.max(0.0), xs, v)
    }

    /// One condensed QP around `u`; returns the control step and the slack.
    fn subproblem(&self, u: &[ControlInput], xs: &[AgentState]) -> Result<(Vec<ControlInput>, f64), QpError> {
        let m = self.m();
        let nu = 2 * m;
        // Separate slacks for the walls, each agent and each liveness target,
        // so one infeasible source cannot relax the others.
        let agents = self.obstacles.iter().filter(|o| o.agent).count();
        let ns = 1 + agents + self.live.len();
        let n = nu + ns;
        let dt = self.limits.dt;

        // Sensitivities S_k = d x_k / d U.
        let mut sens = vec![DMatrix::<f64>::zeros(4, nu)];
        for k in 0..m {
            let s = &xs[k];
            let prev = &sens[k];
            let mut next = prev.clone();
            let (st, ct) = s.theta.sin_cos();
            for c in 0..nu {
                next[(0, c)] += dt * (-s.v * st * prev[(2, c)] + ct * prev[(3, c)]);
                next[(1, c)] += dt * (s.v * ct * prev[(2, c)] + st * prev[(3, c)]);
            }
            next[(2, 2 * k)] += dt;
            next[(3, 2 * k + 1)] += dt;
            sens.push(next);
        }

        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut c = DVector::<f64>::zeros(n);
        for k in 1..=m {
            let q = self.q_at(k);
            let e = self.error(&xs[k], k);
            let sk = &sens[k];
            for i in 0..4 {
                if q[i] == 0.0 {
                    continue;
                }
                let row = sk.row(i);
                for a in 0..nu {
                    let ra = row[a];
                    if ra == 0.0 {
                        continue;
                    }
                    c[a] += q[i] * e[i] * ra;
                    for b in 0..nu {
                        h[(a, b)] += q[i] * ra * row[b];
                    }
                }
            }
        }
        for k in 0..m {
            h[(2 * k, 2 * k)] += self.config.r[0];
            h[(2 * k + 1, 2 * k + 1)] += self.config.r[1];
            c[2 * k] += self.config.r[0] * u[k].omega;
            c[2 * k + 1] += self.config.r[1] * u[k].a;
        }
        for i in nu..n {
            // Static walls are the last thing to give up.
            let w = if i == nu { WALL_SLACK_SCALE } else { 1.0 };
            h[(i, i)] = w * PLAN_SLACK_WEIGHT;
            c[i] = w * PLAN_SLACK_LINEAR;
        }

        let mut rows: Vec<RowDVector<f64>> = Vec::new();
        let mut rhs: Vec<f64> = Vec::new();
        let mut push = |coef: RowDVector<f64>, b: f64| {
            rows.push(coef);
            rhs.push(b);
        };
        let lim = self.limits;
        for k in 0..m {
            let bounds = [(2 * k, u[k].omega, lim.omega_max), (2 * k + 1, u[k].a, lim.a_max)];
            for (idx, val, hi) in bounds {
                let mut r = RowDVector::zeros(n);
                r[idx] = 1.0;
                push(r.clone(), hi - val);
                push(-r, hi + val);
            }
        }
        for i in nu..n {
            let mut r = RowDVector::zeros(n);
            r[i] = -1.0;
            push(r, 0.0);
        }
        for k in 1..=m {
            let mut r = RowDVector::zeros(n);
            r.columns_mut(0, nu).copy_from(&sens[k].row(3));
            push(r.clone(), lim.v_max - xs[k].v);
            push(-r, xs[k].v);
        }
        let grad_row = |g: &[f64; 4], k: usize| -> RowDVector<f64> {
            let mut r = RowDVector::zeros(nu);
            for i in 0..4 {
                if g[i] != 0.0 {
                    r += sens[k].row(i) * g[i];
                }
            }
            r
        };
        let mut barrier_row = |slack: usize, g1: RowDVector<f64>, g0: RowDVector<f64>, decay: f64, b: f64| {
            let mut r = RowDVector::zeros(n);
            r.columns_mut(0, nu).copy_from(&(-(g1 - g0 * decay)));
            r[nu + slack] = -1.0;
            rows.push(r);
            rhs.push(b);
        };
        let mut agent_slot = 0;
        for o in &self.obstacles {
            let g = self.gamma(o);
            let oi = if o.agent {
                agent_slot += 1;
                agent_slot
            } else {
                0
            };
            for k in 1..m {
                let (b0, d0) = self.obstacle_barrier(o, &xs[k], k);
                let (b1, d1) = self.obstacle_barrier(o, &xs[k + 1], k + 1);
                barrier_row(oi, grad_row(&d1, k + 1), grad_row(&d0, k), 1.0 - g, b1 - (1.0 - g) * b0);
            }
        }
        let gl = self.config.gamma_liveness;
        for (li, lt) in self.live.iter().enumerate() {
            for k in 0..m {
                if lt.t_j(k + 1, dt) <= 0.0 {
                    break;
                }
                if let (Some((b0, d0)), Some((b1, d1))) = (lt.eval(&xs[k], k, dt), lt.eval(&xs[k + 1], k + 1, dt)) {
                    barrier_row(
                        1 + agents + li,
                        grad_row(&d1, k + 1),
                        grad_row(&d0, k),
                        1.0 - gl,
                        b1 - (1.0 - gl) * b0 - gl * lt.lag,
                    );
                }
            }
        }

        let mut a = DMatrix::<f64>::zeros(rows.len(), n);
        for (i, r) in rows.iter().enumerate() {
            a.row_mut(i).copy_from(r);
        }
        let qp = DenseQp {
            h,
            c,
            a,
            b: DVector::from_vec(rhs),
        };
        let sol = qp.solve()?;
        let step = (0..m)
            .map(|k| ControlInput::new(sol.x[2 * k], sol.x[2 * k + 1]))
            .collect();
        let slack = (nu..n).map(|i| sol.x[i]).fold(0.0, f64::max);
        Ok((step, slack))
    }
}

/// Constrained obstacles and liveness targets for `ego`.
fn build_problem<'a>(
    snapshot: &WorldSnapshot,
    ego: usize,
    route: &Route,
    limits: &'a KinodynamicLimits,
    config: &'a MpcConfig,
) -> Problem<'a> {
    let me = &snapshot.agents[ego];
    let x0 = me.state;
    let radius = me.radius + config.radius_margin;
    let mut obstacles: Vec<Predicted> = snapshot
        .visible_obstacles(ego, config.obstacle_range)
        .into_iter()
        .map(|i| {
            let c = &snapshot.obstacles[i];
            Predicted {
                p0: c.center(),
                vel: Vec2::zeros(),
                radius: c.radius,
                agent: false,
            }
        })
        .collect();
    let mut live = Vec::new();
    for (j, a) in snapshot.agents.iter().enumerate() {
        if j == ego {
            continue;
        }
        let vel = if a.parked { Vec2::zeros() } else { a.state.velocity() };
        obstacles.push(Predicted {
            p0: a.state.position(),
            vel,
            radius: a.radius,
            agent: true,
        });
        if config.liveness && !a.parked {
            if let Some(geo) = liveness_geometry(&x0, me.radius, &ObstacleView::moving(&a.state, a.radius)) {
                live.push(LiveTarget {
                    c: geo.collision_point,
                    delta: geo.delta,
                    t_j0: geo.t_j,
                    lag: if geo.delta < 0.0 { config.yield_lag } else { 0.0 },
                    offset: (geo.collision_point - x0.position()).norm() - geo.d_i,
                });
            }
        }
    }
    Problem {
        x0,
        radius,
        obstacles,
        live,
        reference: reference(&x0, route, limits, config.controls()),
        limits,
        config,
    }
}

/// Plan `horizon - 1` controls for agent `ego`. `warm` seeds the first
/// iterate (typically the previous plan shifted by one step).
pub fn mpc_plan(
    snapshot: &WorldSnapshot,
    ego: usize,
    route: &Route,
    limits: &KinodynamicLimits,
    config: &MpcConfig,
    warm: Option<&[ControlInput]>,
) -> Result<MpcPlan, MpcError> {
    let prob = build_problem(snapshot, ego, route, limits, config);
    let m = prob.m();
    let mut u: Vec<ControlInput> = (0..m)
        .map(|k| {
            warm.and_then(|w| w.get(k).or(w.last()))
                .map(|c| clamp_control(c, limits))
                .unwrap_or_default()
        })
        .collect();
    // Keep the seed speed-feasible so the merit compares like with like.
    let mut v = prob.x0.v;
    for c in &mut u {
        let next = v + limits.dt * c.a;
        if next > limits.v_max || next < 0.0 {
            c.a = (next.clamp(0.0, limits.v_max) - v) / limits.dt;
        }
        v += limits.dt * c.a;
    }

    let (mut merit, mut xs, mut viol) = prob.merit(&u);
    let mut slack = 0.0;
    let mut iterations = 0;
    for _ in 0..config.max_iterations {
        iterations += 1;
        let (step, s) = prob.subproblem(&u, &xs)?;
        slack = s;
        let size = step.iter().map(|c| c.omega.abs().max(c.a.abs())).fold(0.0, f64::max);
        let mut accepted = false;
        let mut alpha = 1.0;
        for _ in 0..5 {
            let cand: Vec<ControlInput> = u
                .iter()
                .zip(&step)
                .map(|(c, d)| ControlInput::new(c.omega + alpha * d.omega, c.a + alpha * d.a))
                .collect();
            let (mc, xc, vc) = prob.merit(&cand);
            if mc.is_finite() && mc < merit - 1e-12 {
                u = cand;
                merit = mc;
                xs = xc;
                viol = vc;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted || alpha * size < config.tolerance {
            break;
        }
    }
    if !merit.is_finite() || u.iter().any(|c| !c.omega.is_finite() || !c.a.is_finite()) {
        return Err(MpcError::NonFinite);
    }
    Ok(MpcPlan {
        cost: prob.cost(&u, &xs),
        controls: u,
        states: xs,
        slack,
        violation: viol.max(0.0),
        iterations,
    })
}

/// MPC expert as a closed-loop controller. Keeps the previous plan as the
/// warm start for the next call.
pub struct MpcController {
    pub config: MpcConfig,
    warm: Vec<ControlInput>,
}

impl MpcController {
    pub fn new(config: MpcConfig) -> Self {
        Self {
            config,
            warm: Vec::new(),
        }
    }
}

impl Controller for MpcController {
    fn name(&self) -> &str {
        if self.config.liveness {
            "mpc-cbf-live"
        } else {
            "mpc-cbf"
        }
    }

    fn control(
        &mut self,
        snapshot: &WorldSnapshot,
        ego: usize,
        route: &Route,
        limits: &KinodynamicLimits,
    ) -> ControlDecision {
        let warm = if self.warm.is_empty() {
            None
        } else {
            Some(&self.warm[..])
        };
        match mpc_plan(snapshot, ego, route, limits, &self.config, warm) {
            Ok(plan) => {
                let status = plan.status();
                let control = clamp_control(&plan.controls[0], limits);
                self.warm = plan.controls[1..].to_vec();
                ControlDecision {
                    control,
                    status: Some(status),
                }
            }
            Err(e) => {
                log::warn!("mpc plan failed for agent {ego}: {e}");
                self.warm.clear();
                let v = snapshot.agents[ego].state.v;
                let a = if v > V_FLOOR { -limits.a_max } else { 0.0 };
                ControlDecision {
                    control: ControlInput::new(0.0, a),
                    status: Some(QpStatus::Infeasible),
                }
            }
        }
    }
}
