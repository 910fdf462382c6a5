//! Double-integrator unicycle model shared by the simulator, the MPC expert
//! and the barrier-function rows.
//!
//! State is `(x, y, theta, v)`, control is `(omega, a)`. The continuous model is
//! `x' = v cos(theta)`, `y' = v sin(theta)`, `theta' = omega`, `v' = a`, and the
//! simulator discretizes it with one explicit Euler step per control cycle.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Pose and forward speed of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    /// Heading in radians, kept in (-pi, pi].
    pub theta: f64,
    /// Forward speed in m/s, kept in [0, v_max].
    pub v: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, theta: f64, v: f64) -> Self {
        Self { x, y, theta, v }
    }

    pub fn position(&self) -> nalgebra::Vector2<f64> {
        nalgebra::Vector2::new(self.x, self.y)
    }

    /// Unit heading vector.
    pub fn heading(&self) -> nalgebra::Vector2<f64> {
        nalgebra::Vector2::new(self.theta.cos(), self.theta.sin())
    }

    pub fn velocity(&self) -> nalgebra::Vector2<f64> {
        self.heading() * self.v
    }
}

/// Turning rate and linear acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub omega: f64,
    pub a: f64,
}

impl ControlInput {
    pub fn new(omega: f64, a: f64) -> Self {
        Self { omega, a }
    }

    pub fn as_vector(&self) -> nalgebra::Vector2<f64> {
        nalgebra::Vector2::new(self.omega, self.a)
    }

    pub fn from_vector(u: &nalgebra::Vector2<f64>) -> Self {
        Self { omega: u[0], a: u[1] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinodynamicLimits {
    pub v_max: f64,
    pub a_max: f64,
    pub omega_max: f64,
    /// Control period in seconds.
    pub dt: f64,
}

impl Default for KinodynamicLimits {
    fn default() -> Self {
        Self {
            v_max: 0.3,
            a_max: 0.1,
            omega_max: 0.5,
            dt: 0.2,
        }
    }
}

impl KinodynamicLimits {
    pub fn is_valid(&self) -> bool {
        [self.v_max, self.a_max, self.omega_max, self.dt]
            .iter()
            .all(|x| x.is_finite() && *x > 0.0)
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let two_pi = 2.0 * PI;
    let mut t = theta.rem_euclid(two_pi);
    if t > PI {
        t -= two_pi;
    }
    t
}

/// Continuous-time state derivative `f(x) + B u`.
pub fn unicycle_derivative(state: &AgentState, control: &ControlInput) -> [f64; 4] {
    [
        state.v * state.theta.cos(),
        state.v * state.theta.sin(),
        control.omega,
        control.a,
    ]
}

/// One explicit Euler step, followed by the speed clamp and heading wrap.
pub fn integrate_step(state: &AgentState, control: &ControlInput, limits: &KinodynamicLimits) -> AgentState {
    let d = unicycle_derivative(state, control);
    let dt = limits.dt;
    AgentState {
        x: state.x + dt * d[0],
        y: state.y + dt * d[1],
        theta: wrap_angle(state.theta + dt * d[2]),
        v: (state.v + dt * d[3]).clamp(0.0, limits.v_max),
    }
}

pub fn clamp_control(control: &ControlInput, limits: &KinodynamicLimits) -> ControlInput {
    ControlInput {
        omega: control.omega.clamp(-limits.omega_max, limits.omega_max),
        a: control.a.clamp(-limits.a_max, limits.a_max),
    }
}
