//! Linear inequality rows `g . u <= h` over the control `u = (omega, a)`.
//!
//! Two families of rows are produced:
//!
//! * obstacle rows, a second-order barrier on the squared clearance
//!   `b = |p_i - p_j|^2 - (r_i + r_j)^2` against every visible circle and agent;
//! * liveness rows, a first-order barrier on the difference of the two agents'
//!   arrival times at the point where their forward rays cross. These only act
//!   on the acceleration, so the filter never changes where an agent drives,
//!   only when it gets there.
//!
//! Control bounds are appended as four plain rows so the QP layer sees a
//! bounded feasible set.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{AgentState, KinodynamicLimits};
use crate::world::Vec2;

/// Below this speed the arrival time `d / v` is treated as undefined.
pub const V_FLOOR: f64 = 1e-3;
/// Normalized determinant below which two rays are considered parallel.
pub const PARALLEL_EPS: f64 = 1e-9;

/// An obstacle as seen by the ego agent. Static circles carry `theta = v = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleView {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    pub radius: f64,
}

impl ObstacleView {
    pub fn stationary(x: f64, y: f64, radius: f64) -> Self {
        Self {
            x,
            y,
            theta: 0.0,
            v: 0.0,
            radius,
        }
    }

    pub fn moving(state: &AgentState, radius: f64) -> Self {
        Self {
            x: state.x,
            y: state.y,
            theta: state.theta,
            v: state.v,
            radius,
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn velocity(&self) -> Vec2 {
        Vec2::new(self.theta.cos(), self.theta.sin()) * self.v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RowKind {
    Obstacle,
    Liveness,
    Bound,
}

/// Where a row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SourceId {
    Agent(usize),
    Static(usize),
    /// 0: omega <= max, 1: -omega <= max, 2: a <= max, 3: -a <= max.
    Bound(u8),
}

/// Index into `PenaltyGradient`.
pub const P_O1: usize = 0;
pub const P_O2: usize = 1;
pub const P_L_FAST: usize = 2;
pub const P_L_SLOW: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRow {
    pub g: Vec2,
    pub h: f64,
    pub kind: RowKind,
    pub source_id: SourceId,
    /// `dh / d(p_o1, p_o2, p_l_fast, p_l_slow)`, used to train the penalty heads.
    pub dh_dpenalty: [f64; 4],
}

impl ConstraintRow {
    pub fn residual(&self, u: &Vec2) -> f64 {
        self.g.dot(u) - self.h
    }
}

/// Strictly positive class-K coefficients emitted by the policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyValues {
    pub p_o1: f64,
    pub p_o2: f64,
    pub p_l_fast: f64,
    pub p_l_slow: f64,
}

impl PenaltyValues {
    pub fn uniform(p: f64) -> Self {
        Self {
            p_o1: p,
            p_o2: p,
            p_l_fast: p,
            p_l_slow: p,
        }
    }

    pub fn all_positive(&self) -> bool {
        [self.p_o1, self.p_o2, self.p_l_fast, self.p_l_slow]
            .iter()
            .all(|p| p.is_finite() && *p > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LieDerivatives {
    pub lf_b: f64,
    pub lf2_b: f64,
    /// Coefficients of `(omega, a)` in the second derivative of `b`.
    pub lglf_b: Vec2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("agent centers coincide; critical points are undefined")]
    CoincidentCenters,
}

/// Squared-clearance barrier; negative when the two circles overlap.
pub fn obstacle_barrier(ego: &AgentState, obs: &ObstacleView, ego_radius: f64) -> f64 {
    let dx = ego.x - obs.x;
    let dy = ego.y - obs.y;
    let r = ego_radius + obs.radius;
    dx * dx + dy * dy - r * r
}

/// Drift and control Lie derivatives of the obstacle barrier, with the
/// obstacle assumed to keep its heading and speed.
pub fn obstacle_lie_derivatives(ego: &AgentState, obs: &ObstacleView) -> LieDerivatives {
    let dx = ego.x - obs.x;
    let dy = ego.y - obs.y;
    let (si, ci) = ego.theta.sin_cos();
    let (sj, cj) = obs.theta.sin_cos();
    let lf_b = 2.0 * dx * (ego.v * ci - obs.v * cj) + 2.0 * dy * (ego.v * si - obs.v * sj);
    // |v_i - v_j|^2 expands with the cosine of the heading difference.
    let lf2_b = 2.0 * (ego.v * ego.v + obs.v * obs.v - 2.0 * ego.v * obs.v * (ego.theta - obs.theta).cos());
    let lglf_b = Vec2::new(
        -2.0 * dx * ego.v * si + 2.0 * dy * ego.v * ci,
        2.0 * dx * ci + 2.0 * dy * si,
    );
    LieDerivatives { lf_b, lf2_b, lglf_b }
}

/// Second-order barrier row `-LgLf b . u <= Lf^2 b + (p1 + p2) Lf b + p1 p2 b`.
pub fn obstacle_constraint_row(
    ego: &AgentState,
    ego_radius: f64,
    obs: &ObstacleView,
    p_o1: f64,
    p_o2: f64,
    source_id: SourceId,
) -> ConstraintRow {
    debug_assert!(p_o1 > 0.0 && p_o2 > 0.0);
    let b = obstacle_barrier(ego, obs, ego_radius);
    let lie = obstacle_lie_derivatives(ego, obs);
    let h = lie.lf2_b + (p_o1 + p_o2) * lie.lf_b + p_o1 * p_o2 * b;
    let mut dh = [0.0; 4];
    dh[P_O1] = lie.lf_b + p_o2 * b;
    dh[P_O2] = lie.lf_b + p_o1 * b;
    ConstraintRow {
        g: -lie.lglf_b,
        h,
        kind: RowKind::Obstacle,
        source_id,
        dh_dpenalty: dh,
    }
}

/// Outcome of the forward-ray test between the ego and another agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub intersects: bool,
    /// Ray parameters scaled by `det^2`; same signs as the true parameters.
    pub a: f64,
    pub b: f64,
    pub det: f64,
}

impl RayHit {
    fn miss(det: f64) -> Self {
        Self {
            intersects: false,
            a: 0.0,
            b: 0.0,
            det,
        }
    }
}

/// Do the rays from both positions along their headings cross ahead of both?
///
/// With `delta = p_j - p_i` and unit headings, `a` is the other agent's ray
/// parameter and `b` the ego's, each multiplied by `det^2`, so the sign test
/// needs no division.
pub fn ray_intersection(ego: &AgentState, other: &ObstacleView) -> RayHit {
    let (si, ci) = ego.theta.sin_cos();
    let (sj, cj) = other.theta.sin_cos();
    let det = cj * si - sj * ci;
    if ego.v <= 0.0 || other.v <= 0.0 || det.abs() < PARALLEL_EPS {
        return RayHit::miss(det);
    }
    let dx = other.x - ego.x;
    let dy = other.y - ego.y;
    let a = (dy * ci - dx * si) * det;
    let b = (dy * cj - dx * sj) * det;
    RayHit {
        intersects: a > 0.0 && b > 0.0,
        a,
        b,
        det,
    }
}

/// Closest points of each hull toward the other agent.
pub fn critical_points(
    ego: Vec2,
    ego_radius: f64,
    other: Vec2,
    other_radius: f64,
) -> Result<(Vec2, Vec2), GeometryError> {
    let d = other - ego;
    let n = d.norm();
    if n <= 1e-12 {
        return Err(GeometryError::CoincidentCenters);
    }
    let u = d / n;
    Ok((ego + u * ego_radius, other - u * other_radius))
}

/// Crossing point of the two lines through the critical points along the
/// agents' velocities. `None` when the lines are (nearly) parallel.
pub fn projected_collision_point(crit_i: Vec2, vel_i: Vec2, crit_j: Vec2, vel_j: Vec2) -> Option<Vec2> {
    let ni = vel_i.norm();
    let nj = vel_j.norm();
    if ni <= 0.0 || nj <= 0.0 {
        return None;
    }
    let det = vel_i.x * vel_j.y - vel_i.y * vel_j.x;
    if (det / (ni * nj)).abs() < PARALLEL_EPS {
        return None;
    }
    let next_i = crit_i + vel_i;
    let next_j = crit_j + vel_j;
    let a_i = crit_i.x * next_i.y - crit_i.y * next_i.x;
    let a_j = crit_j.x * next_j.y - crit_j.y * next_j.x;
    Some(Vec2::new(
        (a_j * vel_i.x - a_i * vel_j.x) / det,
        (a_j * vel_i.y - a_i * vel_j.y) / det,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrivalTimes {
    pub d_i: f64,
    pub d_j: f64,
    pub t_i: f64,
    pub t_j: f64,
    /// +1 when the ego reaches the crossing first, -1 when it should yield.
    pub delta: f64,
}

/// Distances and arrival times of both critical points at `c`. `None` when
/// either speed is at or below `V_FLOOR`.
pub fn times_to_collision(crit_i: Vec2, v_i: f64, crit_j: Vec2, v_j: f64, c: Vec2) -> Option<ArrivalTimes> {
    if v_i <= V_FLOOR || v_j <= V_FLOOR {
        return None;
    }
    let d_i = (crit_i - c).norm();
    let d_j = (crit_j - c).norm();
    let t_i = d_i / v_i;
    let t_j = d_j / v_j;
    // Ties yield.
    let delta = if t_i < t_j { 1.0 } else { -1.0 };
    Some(ArrivalTimes {
        d_i,
        d_j,
        t_i,
        t_j,
        delta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LivenessGeometry {
    pub intersects: bool,
    pub critical_i: Vec2,
    pub critical_j: Vec2,
    pub collision_point: Vec2,
    pub d_i: f64,
    pub d_j: f64,
    pub t_i: f64,
    pub t_j: f64,
    pub delta: f64,
    /// Ego speed the times were computed with.
    pub v_i: f64,
}

impl LivenessGeometry {
    /// `delta * (t_j - t_i)`.
    pub fn barrier(&self) -> f64 {
        self.delta * (self.t_j - self.t_i)
    }
}

/// Full liveness geometry for one ego/other pair, or `None` when no liveness
/// row applies (rays do not cross, a speed is below the floor, hulls overlap
/// at the centers, or the critical-point rays are parallel).
pub fn liveness_geometry(ego: &AgentState, ego_radius: f64, other: &ObstacleView) -> Option<LivenessGeometry> {
    if ego.v <= V_FLOOR || other.v <= V_FLOOR {
        return None;
    }
    if !ray_intersection(ego, other).intersects {
        return None;
    }
    let (ci, cj) = critical_points(ego.position(), ego_radius, other.position(), other.radius).ok()?;
    let c = projected_collision_point(ci, ego.velocity(), cj, other.velocity())?;
    let times = times_to_collision(ci, ego.v, cj, other.v, c)?;
    Some(LivenessGeometry {
        intersects: true,
        critical_i: ci,
        critical_j: cj,
        collision_point: c,
        d_i: times.d_i,
        d_j: times.d_j,
        t_i: times.t_i,
        t_j: times.t_j,
        delta: times.delta,
        v_i: ego.v,
    })
}

/// `-delta (d_i / v_i^2) a <= p_l (t_j - t_i)`, acting on acceleration only.
///
/// For the leading agent this bounds how hard it may brake; for the yielding
/// agent the right-hand side is negative and the row forces deceleration that
/// grows with how far behind it already is.
pub fn liveness_constraint_row(geom: &LivenessGeometry, p_l: f64, source_id: SourceId) -> ConstraintRow {
    debug_assert!(p_l > 0.0);
    let lag = geom.t_j - geom.t_i;
    let mut dh = [0.0; 4];
    if geom.delta > 0.0 {
        dh[P_L_FAST] = lag;
    } else {
        dh[P_L_SLOW] = lag;
    }
    ConstraintRow {
        g: Vec2::new(0.0, -geom.delta * geom.d_i / (geom.v_i * geom.v_i)),
        h: p_l * lag,
        kind: RowKind::Liveness,
        source_id,
        dh_dpenalty: dh,
    }
}

/// The four symmetric box rows on `(omega, a)`.
pub fn bound_rows(limits: &KinodynamicLimits) -> [ConstraintRow; 4] {
    let row = |g: Vec2, h: f64, k: u8| ConstraintRow {
        g,
        h,
        kind: RowKind::Bound,
        source_id: SourceId::Bound(k),
        dh_dpenalty: [0.0; 4],
    };
    [
        row(Vec2::new(1.0, 0.0), limits.omega_max, 0),
        row(Vec2::new(-1.0, 0.0), limits.omega_max, 1),
        row(Vec2::new(0.0, 1.0), limits.a_max, 2),
        row(Vec2::new(0.0, -1.0), limits.a_max, 3),
    ]
}

/// One entry of the ego's local view of the world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewEntry {
    pub obstacle: ObstacleView,
    pub source: SourceId,
    /// Other agents get liveness rows; static circles never do.
    pub is_agent: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowOptions {
    pub liveness: bool,
}

impl Default for RowOptions {
    fn default() -> Self {
        Self { liveness: true }
    }
}

/// Obstacle rows by ascending center distance, then liveness rows, then the
/// four bound rows.
pub fn build_all_rows(
    ego: &AgentState,
    ego_radius: f64,
    view: &[ViewEntry],
    penalties: &PenaltyValues,
    limits: &KinodynamicLimits,
    options: RowOptions,
) -> Vec<ConstraintRow> {
    let p = ego.position();
    let mut order: Vec<(f64, usize)> = view
        .iter()
        .enumerate()
        .map(|(i, e)| ((e.obstacle.position() - p).norm(), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut rows = Vec::with_capacity(view.len() + 6);
    for &(_, i) in &order {
        let e = &view[i];
        rows.push(obstacle_constraint_row(
            ego,
            ego_radius,
            &e.obstacle,
            penalties.p_o1,
            penalties.p_o2,
            e.source,
        ));
    }
    if options.liveness {
        for &(_, i) in &order {
            let e = &view[i];
            if !e.is_agent {
                continue;
            }
            if let Some(geom) = liveness_geometry(ego, ego_radius, &e.obstacle) {
                let p_l = if geom.delta > 0.0 {
                    penalties.p_l_fast
                } else {
                    penalties.p_l_slow
                };
                rows.push(liveness_constraint_row(&geom, p_l, e.source));
            }
        }
    }
    rows.extend(bound_rows(limits));
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{integrate_step, ControlInput};
    use approx::assert_abs_diff_eq;
    use nalgebra::{Matrix2, Vector2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn st(x: f64, y: f64, th: f64, v: f64) -> AgentState {
        AgentState::new(x, y, th, v)
    }

    #[test]
    fn barrier_examples() {
        let ego = st(0.0, 0.0, 0.0, 0.0);
        assert_abs_diff_eq!(
            obstacle_barrier(&ego, &ObstacleView::stationary(0.3, 0.0, 0.1), 0.1),
            0.05,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            obstacle_barrier(&ego, &ObstacleView::stationary(0.2, 0.0, 0.1), 0.1),
            0.0,
            epsilon = 1e-15
        );
        assert!(obstacle_barrier(&ego, &ObstacleView::stationary(0.15, 0.0, 0.1), 0.1) < 0.0);
    }

    #[test]
    fn lie_derivative_examples() {
        let l = obstacle_lie_derivatives(
            &st(0.0, 0.0, 0.4, 0.0),
            &ObstacleView::moving(&st(1.0, 2.0, 1.0, 0.0), 0.1),
        );
        assert_eq!((l.lf_b, l.lf2_b), (0.0, 0.0));

        let l = obstacle_lie_derivatives(&st(0.0, 0.0, 0.0, 0.3), &ObstacleView::stationary(1.0, 0.0, 0.1));
        assert_abs_diff_eq!(l.lf_b, -0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(l.lglf_b[1], -2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l.lglf_b[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l.lf2_b, 0.18, epsilon = 1e-15);
    }

    #[test]
    fn obstacle_row_example() {
        let row = obstacle_constraint_row(
            &st(0.0, 0.0, 0.0, 0.3),
            0.1,
            &ObstacleView::stationary(1.0, 0.0, 0.1),
            1.0,
            1.0,
            SourceId::Static(0),
        );
        // b = 0.96, Lf b = -0.6, Lf^2 b = 0.18.
        assert_abs_diff_eq!(row.g[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(row.g[1], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(row.h, 0.18 - 1.2 + 0.96, epsilon = 1e-12);
        assert_eq!(row.kind, RowKind::Obstacle);
    }

    #[test]
    fn obstacle_row_rest_is_feasible_when_moving_apart() {
        // Both b >= 0 and Lf b >= 0 imply u = 0 satisfies the row.
        let row = obstacle_constraint_row(
            &st(0.0, 0.0, PI, 0.2),
            0.1,
            &ObstacleView::stationary(1.0, 0.0, 0.1),
            0.5,
            0.7,
            SourceId::Static(0),
        );
        assert!(row.h >= 0.0);
    }

    #[test]
    fn obstacle_row_relaxes_with_penalty() {
        let ego = st(0.0, 0.0, 0.0, 0.3);
        let obs = ObstacleView::stationary(1.0, 0.0, 0.1);
        let mut prev = f64::NEG_INFINITY;
        for p in [1.0, 2.0, 5.0, 20.0, 100.0] {
            let row = obstacle_constraint_row(&ego, 0.1, &obs, p, p, SourceId::Static(0));
            assert!(row.h > prev);
            prev = row.h;
        }
    }

    /// Central finite differences of the simulated barrier against the
    /// analytic first and second Lie derivatives.
    #[test]
    fn lie_derivatives_match_simulated_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dt = 1e-4;
        let lim = KinodynamicLimits {
            dt,
            v_max: 10.0,
            a_max: 10.0,
            omega_max: 10.0,
        };
        let back = KinodynamicLimits { dt: -dt, ..lim };
        for _ in 0..1000 {
            let ego = st(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-PI..PI),
                rng.gen_range(0.05..0.3),
            );
            let moving = rng.gen_bool(0.5);
            let obs_state = st(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                if moving { rng.gen_range(-PI..PI) } else { 0.0 },
                if moving { rng.gen_range(0.05..0.3) } else { 0.0 },
            );
            let u = ControlInput::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.1..0.1));
            let zero = ControlInput::default();
            let b_at = |e: &AgentState, o: &AgentState| obstacle_barrier(e, &ObstacleView::moving(o, 0.1), 0.1);
            let lf_at =
                |e: &AgentState, o: &AgentState| obstacle_lie_derivatives(e, &ObstacleView::moving(o, 0.1)).lf_b;
            let ef = integrate_step(&ego, &zero, &lim);
            let eb = integrate_step(&ego, &zero, &back);
            let of = integrate_step(&obs_state, &zero, &lim);
            let ob = integrate_step(&obs_state, &zero, &back);
            let fd_b = (b_at(&ef, &of) - b_at(&eb, &ob)) / (2.0 * dt);
            let lie = obstacle_lie_derivatives(&ego, &ObstacleView::moving(&obs_state, 0.1));
            let scale = lie.lf_b.abs().max(1e-2);
            assert!((fd_b - lie.lf_b).abs() / scale <= 1e-3, "Lf b {} vs {}", fd_b, lie.lf_b);

            let ef = integrate_step(&ego, &u, &lim);
            let eb = integrate_step(&ego, &u, &back);
            let fd_lf = (lf_at(&ef, &of) - lf_at(&eb, &ob)) / (2.0 * dt);
            let pred = lie.lf2_b + lie.lglf_b.dot(&u.as_vector());
            let scale = pred.abs().max(1e-2);
            assert!((fd_lf - pred).abs() / scale <= 1e-3, "d/dt Lf b {} vs {}", fd_lf, pred);
        }
    }

    #[test]
    fn sum_of_headings_fails_the_flow_oracle() {
        // The cos(theta_i + theta_j) variant disagrees with simulation.
        let ego = st(0.0, 0.0, 0.6, 0.3);
        let obs = st(1.0, 0.5, 1.1, 0.2);
        let v_sum = 2.0 * (0.09 + 0.04 - 2.0 * 0.3 * 0.2 * (0.6f64 + 1.1).cos());
        let lie = obstacle_lie_derivatives(&ego, &ObstacleView::moving(&obs, 0.1));
        let rel = ego.velocity() - obs.velocity();
        assert_abs_diff_eq!(lie.lf2_b, 2.0 * rel.norm_squared(), epsilon = 1e-14);
        assert!((v_sum - lie.lf2_b).abs() > 1e-2);
    }

    fn parametric_oracle(ego: &AgentState, other: &ObstacleView) -> Option<(f64, f64)> {
        let m = Matrix2::new(ego.theta.cos(), -other.theta.cos(), ego.theta.sin(), -other.theta.sin());
        let rhs = Vector2::new(other.x - ego.x, other.y - ego.y);
        let sol = m.lu().solve(&rhs)?;
        Some((sol[0], sol[1]))
    }

    #[test]
    fn ray_examples() {
        let a = st(0.0, 0.0, 0.3, 0.3);
        let b = ObstacleView::moving(&st(1.0, 1.0, 0.3, 0.3), 0.1);
        assert!(!ray_intersection(&a, &b).intersects);

        let a = st(0.0, 0.0, 0.0, 0.3);
        let b = ObstacleView::moving(&st(1.0, 1.0, -PI / 2.0, 0.3), 0.1);
        assert!(ray_intersection(&a, &b).intersects);
        let (s, r) = parametric_oracle(&a, &b).unwrap();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r, 1.0, epsilon = 1e-12);

        let a = st(0.0, 0.0, PI, 0.3);
        let b = ObstacleView::moving(&st(1.0, 0.0, 0.0, 0.3), 0.1);
        assert!(!ray_intersection(&a, &b).intersects);
    }

    #[test]
    fn ray_test_matches_parametric_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut checked = 0;
        for _ in 0..10_000 {
            let a = st(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-PI..PI),
                rng.gen_range(0.01..0.3),
            );
            let b = ObstacleView::moving(
                &st(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-PI..PI),
                    rng.gen_range(0.01..0.3),
                ),
                0.1,
            );
            let det = (a.theta.cos() * b.theta.sin() - a.theta.sin() * b.theta.cos()).abs();
            if det < 1e-9 {
                continue;
            }
            let (s, r) = parametric_oracle(&a, &b).unwrap();
            assert_eq!(ray_intersection(&a, &b).intersects, s > 0.0 && r > 0.0);
            checked += 1;
        }
        assert!(checked > 9_900);
    }

    #[test]
    fn critical_point_examples() {
        let (pi, pj) = critical_points(Vec2::new(0.0, 0.0), 0.1, Vec2::new(1.0, 0.0), 0.1).unwrap();
        assert_abs_diff_eq!((pi - Vec2::new(0.1, 0.0)).norm(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!((pj - Vec2::new(0.9, 0.0)).norm(), 0.0, epsilon = 1e-15);

        let (pi, pj) = critical_points(Vec2::new(0.0, 0.0), 0.1, Vec2::new(0.0, 0.2), 0.1).unwrap();
        assert_abs_diff_eq!((pi - pj).norm(), 0.0, epsilon = 1e-15);

        let (qj, qi) = critical_points(Vec2::new(1.0, 0.0), 0.1, Vec2::new(0.0, 0.0), 0.1).unwrap();
        let (pi, pj) = critical_points(Vec2::new(0.0, 0.0), 0.1, Vec2::new(1.0, 0.0), 0.1).unwrap();
        assert_eq!((pi, pj), (qi, qj));

        assert_eq!(
            critical_points(Vec2::new(1.0, 1.0), 0.1, Vec2::new(1.0, 1.0), 0.1),
            Err(GeometryError::CoincidentCenters)
        );
    }

    #[test]
    fn collision_point_examples() {
        let c = projected_collision_point(
            Vec2::new(0.1, 0.0),
            Vec2::new(0.3, 0.0),
            Vec2::new(1.0, 0.9),
            Vec2::new(0.0, -0.3),
        )
        .unwrap();
        assert_abs_diff_eq!((c - Vec2::new(1.0, 0.0)).norm(), 0.0, epsilon = 1e-12);

        let c = projected_collision_point(
            Vec2::new(-1.0, 0.0),
            Vec2::new(0.3, 0.0),
            Vec2::new(0.0, -1.0),
            Vec2::new(0.0, 0.3),
        )
        .unwrap();
        assert_abs_diff_eq!(c.norm(), 0.0, epsilon = 1e-12);

        assert!(projected_collision_point(
            Vec2::new(0.0, 0.0),
            Vec2::new(0.3, 0.0),
            Vec2::new(0.0, 1.0),
            Vec2::new(0.2, 0.0),
        )
        .is_none());
    }

    #[test]
    fn collision_point_matches_parametric_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let pi = Vec2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let pj = Vec2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let (ti, tj): (f64, f64) = (rng.gen_range(-PI..PI), rng.gen_range(-PI..PI));
            let (vi, vj) = (rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3));
            let di = Vec2::new(ti.cos(), ti.sin()) * vi;
            let dj = Vec2::new(tj.cos(), tj.sin()) * vj;
            if (ti.cos() * tj.sin() - ti.sin() * tj.cos()).abs() < 1e-3 {
                continue;
            }
            let c = projected_collision_point(pi, di, pj, dj).unwrap();
            let m = Matrix2::new(di.x, -dj.x, di.y, -dj.y);
            let s = m.lu().solve(&(pj - pi)).unwrap();
            let oracle = pi + di * s[0];
            assert!((c - oracle).norm() <= 1e-8 * (1.0 + oracle.norm()), "{c} vs {oracle}");
        }
    }

    #[test]
    fn arrival_time_examples() {
        let t = times_to_collision(
            Vec2::new(-1.0, 0.0),
            0.3,
            Vec2::new(0.0, -2.0),
            0.3,
            Vec2::new(0.0, 0.0),
        )
        .unwrap();
        assert_abs_diff_eq!(t.t_i, 1.0 / 0.3, epsilon = 1e-12);
        assert_eq!(t.delta, 1.0);

        let t = times_to_collision(Vec2::new(-1.0, 0.0), 0.3, Vec2::new(0.0, -1.0), 0.3, Vec2::zeros()).unwrap();
        assert_eq!(t.t_i, t.t_j);
        assert_eq!(t.delta, -1.0);

        let t = times_to_collision(Vec2::new(-1.0, 0.0), 0.3, Vec2::new(0.0, -1.0), 2e-3, Vec2::zeros()).unwrap();
        assert!(t.t_j > 100.0);
        assert_eq!(t.delta, 1.0);

        assert!(times_to_collision(Vec2::new(-1.0, 0.0), 0.3, Vec2::new(0.0, -1.0), 5e-4, Vec2::zeros()).is_none());
    }

    fn geom(delta: f64, t_i: f64, t_j: f64) -> LivenessGeometry {
        LivenessGeometry {
            intersects: true,
            critical_i: Vec2::zeros(),
            critical_j: Vec2::zeros(),
            collision_point: Vec2::zeros(),
            d_i: 1.0,
            d_j: t_j * 0.3,
            t_i,
            t_j,
            delta,
            v_i: 0.3,
        }
    }

    #[test]
    fn liveness_row_examples() {
        // Leader: bounded braking.
        let row = liveness_constraint_row(&geom(1.0, 3.0, 4.0), 0.5, SourceId::Agent(1));
        assert_abs_diff_eq!(row.h, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(row.g[1], -1.0 / 0.09, epsilon = 1e-12);
        assert_eq!(row.g[0], 0.0);
        let a_min = -row.h / -row.g[1];
        assert!(a_min < 0.0);

        // Yielder: forced braking, a <= -p (t_i - t_j) v^2 / d.
        let row = liveness_constraint_row(&geom(-1.0, 4.0, 3.0), 0.5, SourceId::Agent(1));
        assert!(row.g[1] > 0.0 && row.h < 0.0);
        let a_max = row.h / row.g[1];
        assert_abs_diff_eq!(a_max, -0.5 * 1.0 * 0.09 / 1.0, epsilon = 1e-12);

        let row = liveness_constraint_row(&geom(-1.0, 3.0, 3.0), 0.5, SourceId::Agent(1));
        assert_eq!(row.h, 0.0);
    }

    #[test]
    fn leader_row_bounds_barrier_decay() {
        // A control satisfying the leader row keeps delta*(t_j - t_i) from
        // decaying faster than (1 - p dt) per step, up to O(dt^2). Point agents,
        // so the collision point stays put while both move along their rays.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lim = KinodynamicLimits {
            dt: 0.01,
            v_max: 1.0,
            a_max: 1.0,
            omega_max: 1.0,
        };
        let mut checked = 0;
        for _ in 0..4000 {
            let ego = st(-rng.gen_range(0.8..2.0), 0.0, 0.0, rng.gen_range(0.1..0.3));
            let other = st(0.0, -rng.gen_range(0.8..2.0), PI / 2.0, rng.gen_range(0.1..0.3));
            let ov = ObstacleView::moving(&other, 0.0);
            let Some(g0) = liveness_geometry(&ego, 0.0, &ov) else {
                continue;
            };
            if g0.delta < 0.0 {
                continue;
            }
            let p_l = rng.gen_range(0.1..2.0);
            let row = liveness_constraint_row(&g0, p_l, SourceId::Agent(1));
            // Most aggressive admissible braking.
            let a = (row.h / row.g[1]).max(-1.0);
            let u = ControlInput::new(0.0, a);
            if row.residual(&u.as_vector()) > 1e-12 {
                continue;
            }
            let e1 = integrate_step(&ego, &u, &lim);
            let o1 = integrate_step(&other, &ControlInput::default(), &lim);
            let Some(g1) = liveness_geometry(&e1, 0.0, &ObstacleView::moving(&o1, 0.0)) else {
                continue;
            };
            let b0 = g0.barrier();
            let b1 = (g1.t_j - g1.t_i) * g0.delta;
            // Second-order remainder of t_i = d / v under one Euler step.
            let (d, v) = (g0.d_i, ego.v);
            let rem = 2.0 * lim.dt * lim.dt * (d * a * a / v.powi(3) + a.abs() / v + 1.0);
            assert!(b1 >= (1.0 - p_l * lim.dt) * b0 - rem, "{b1} vs {b0}");
            checked += 1;
        }
        assert!(checked > 500);
    }

    #[test]
    fn build_rows_counts() {
        let lim = KinodynamicLimits::default();
        let pen = PenaltyValues::uniform(1.0);
        let ego = st(0.0, 0.0, 0.0, 0.3);
        let rows = build_all_rows(&ego, 0.1, &[], &pen, &lim, RowOptions::default());
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.kind == RowKind::Bound));

        let view = [ViewEntry {
            obstacle: ObstacleView::stationary(1.0, 0.3, 0.1),
            source: SourceId::Static(0),
            is_agent: false,
        }];
        let rows = build_all_rows(&ego, 0.1, &view, &pen, &lim, RowOptions::default());
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].kind, RowKind::Obstacle);

        // 90 degree crossing: each agent sees 1 obstacle + 1 liveness + 4 bounds.
        let a = st(-1.0, 0.0, 0.0, 0.3);
        let b = st(0.0, -1.2, PI / 2.0, 0.3);
        for (ego, other, id) in [(a, b, 1), (b, a, 0)] {
            let view = [ViewEntry {
                obstacle: ObstacleView::moving(&other, 0.1),
                source: SourceId::Agent(id),
                is_agent: true,
            }];
            let rows = build_all_rows(&ego, 0.1, &view, &pen, &lim, RowOptions::default());
            let kinds: Vec<RowKind> = rows.iter().map(|r| r.kind).collect();
            assert_eq!(
                kinds,
                vec![
                    RowKind::Obstacle,
                    RowKind::Liveness,
                    RowKind::Bound,
                    RowKind::Bound,
                    RowKind::Bound,
                    RowKind::Bound
                ]
            );
            let rows = build_all_rows(&ego, 0.1, &view, &pen, &lim, RowOptions { liveness: false });
            assert_eq!(rows.len(), 5);
        }
    }

    #[test]
    fn rows_sorted_by_distance() {
        let lim = KinodynamicLimits::default();
        let ego = st(0.0, 0.0, 0.0, 0.3);
        let view: Vec<ViewEntry> = [2.0, 0.5, 1.0]
            .iter()
            .enumerate()
            .map(|(i, x)| ViewEntry {
                obstacle: ObstacleView::stationary(*x, 0.0, 0.1),
                source: SourceId::Static(i),
                is_agent: false,
            })
            .collect();
        let rows = build_all_rows(
            &ego,
            0.1,
            &view,
            &PenaltyValues::uniform(1.0),
            &lim,
            RowOptions::default(),
        );
        let ids: Vec<SourceId> = rows.iter().take(3).map(|r| r.source_id).collect();
        assert_eq!(ids, vec![SourceId::Static(1), SourceId::Static(2), SourceId::Static(0)]);
    }

    proptest::proptest! {
        #[test]
        fn liveness_rows_never_steer(
            x in -2.0..-0.5f64, y in -2.0..-0.5f64, vi in 0.01..0.3f64, vj in 0.01..0.3f64, p in 0.01..10.0f64,
        ) {
            let ego = st(x, 0.0, 0.0, vi);
            let other = ObstacleView::moving(&st(0.0, y, PI / 2.0, vj), 0.1);
            if let Some(g) = liveness_geometry(&ego, 0.1, &other) {
                let row = liveness_constraint_row(&g, p, SourceId::Agent(1));
                proptest::prop_assert_eq!(row.g[0], 0.0);
            }
        }

        #[test]
        fn scaling_invariance(
            x in -2.0..2.0f64, y in -2.0..2.0f64, ox in -2.0..2.0f64, oy in -2.0..2.0f64,
            ti in -3.1..3.1f64, tj in -3.1..3.1f64, k in 0.2..5.0f64,
        ) {
            let ego = st(x, y, ti, 0.2);
            let other = st(ox, oy, tj, 0.25);
            let b = obstacle_barrier(&ego, &ObstacleView::moving(&other, 0.1), 0.1);
            let ego_k = st(k * x, k * y, ti, 0.2);
            let other_k = st(k * ox, k * oy, tj, 0.25);
            let bk = obstacle_barrier(&ego_k, &ObstacleView::moving(&other_k, 0.1 * k), 0.1 * k);
            proptest::prop_assert!((bk - k * k * b).abs() <= 1e-9 * (1.0 + bk.abs()));
            let hit = ray_intersection(&ego, &ObstacleView::moving(&other, 0.1));
            if hit.det.abs() > 1e-6 && hit.a.abs() > 1e-9 && hit.b.abs() > 1e-9 {
                let hit_k = ray_intersection(&ego_k, &ObstacleView::moving(&other_k, 0.1 * k));
                proptest::prop_assert_eq!(hit.intersects, hit_k.intersects);
                let g = liveness_geometry(&ego, 0.1, &ObstacleView::moving(&other, 0.1));
                let gk = liveness_geometry(&ego_k, 0.1 * k, &ObstacleView::moving(&other_k, 0.1 * k));
                if let (Some(g), Some(gk)) = (g, gk) {
                    if (g.t_i - g.t_j).abs() > 1e-6 {
                        proptest::prop_assert_eq!(g.delta, gk.delta);
                    }
                }
            }
        }
    }
}
