//! Unicycle dynamics: continuous derivative, RK4 discretization, and the
//! analytic Jacobians of the discrete step used by the planner and the
//! online next-state predictor.

use nalgebra::{Matrix3, Matrix3x2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Wrap an angle to the interval (-PI, PI].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Robot pose: planar position in meters, heading in radians.
///
/// The heading is stored wrapped to (-PI, PI]; constructors and the
/// integrator maintain that invariant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub px: f64,
    pub py: f64,
    pub theta: f64,
}

impl State {
    pub fn new(px: f64, py: f64, theta: f64) -> Self {
        Self {
            px,
            py,
            theta: wrap_angle(theta),
        }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.px, self.py)
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.px, self.py, self.theta)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

/// Command: linear speed (m/s) and angular rate (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Input {
    pub v: f64,
    pub omega: f64,
}

impl Input {
    pub const ZERO: Input = Input { v: 0.0, omega: 0.0 };

    pub fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }

    pub fn clamped(&self, bounds: &InputBounds) -> Input {
        Input {
            v: self.v.clamp(bounds.v_min, bounds.v_max),
            omega: self.omega.clamp(bounds.omega_min, bounds.omega_max),
        }
    }

    pub fn to_vector(&self) -> Vector2<f64> {
        Vector2::new(self.v, self.omega)
    }

    pub fn from_vector(v: Vector2<f64>) -> Self {
        Self { v: v.x, omega: v.y }
    }
}

/// Box bounds on the command channels.
///
/// Default is v in [0, 1] m/s and |omega| <= 2 rad/s. The angular channel is
/// symmetric even though the linear one is one-sided: a differential drive
/// turns both ways, so omega_min defaults to -omega_max.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputBounds {
    pub v_min: f64,
    pub v_max: f64,
    pub omega_min: f64,
    pub omega_max: f64,
}

impl Default for InputBounds {
    fn default() -> Self {
        Self {
            v_min: 0.0,
            v_max: 1.0,
            omega_min: -2.0,
            omega_max: 2.0,
        }
    }
}

impl InputBounds {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.v_min <= self.v_max && self.omega_min <= self.omega_max) {
            return Err("input bounds must satisfy min <= max".into());
        }
        Ok(())
    }
}

/// Jacobians of the discrete step `rk4_step` with respect to state (3x3)
/// and input (3x2), evaluated at a given (state, input, Ts).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jacobians {
    pub a: Matrix3<f64>,
    pub b: Matrix3x2<f64>,
}

/// Continuous unicycle derivative: (v cos θ, v sin θ, ω).
pub fn unicycle_deriv(s: &State, u: &Input) -> Vector3<f64> {
    Vector3::new(u.v * s.theta.cos(), u.v * s.theta.sin(), u.omega)
}

fn deriv_raw(x: &Vector3<f64>, u: &Input) -> Vector3<f64> {
    Vector3::new(u.v * x.z.cos(), u.v * x.z.sin(), u.omega)
}

/// One classical 4th-order Runge-Kutta step with zero-order-hold input,
/// without heading wrapping. The planner iterates in unwrapped heading
/// space so that ADMM residuals never see 2π jumps.
pub fn rk4_step_raw(x: &Vector3<f64>, u: &Input, ts: f64) -> Vector3<f64> {
    let k1 = deriv_raw(x, u);
    let k2 = deriv_raw(&(x + k1 * (ts / 2.0)), u);
    let k3 = deriv_raw(&(x + k2 * (ts / 2.0)), u);
    let k4 = deriv_raw(&(x + k3 * ts), u);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (ts / 6.0)
}

/// One classical 4th-order Runge-Kutta step with zero-order-hold input.
/// The resulting heading is re-wrapped to (-PI, PI].
pub fn rk4_step(s: &State, u: &Input, ts: f64) -> State {
    State::from_vector(rk4_step_raw(&s.to_vector(), u, ts))
}

/// Analytic Jacobians of `rk4_step` at (s, u).
///
/// For the unicycle the four RK4 stages collapse: the heading advances
/// linearly (θ_mid = θ + Ts ω/2, θ_end = θ + Ts ω) and the position update
/// is the Simpson average of cos/sin at those headings, so the chain rule
/// through the stages has a closed form.
pub fn linearize(s: &State, u: &Input, ts: f64) -> Jacobians {
    let th = s.theta;
    let a_half = ts * u.omega / 2.0;
    let th_m = th + a_half;
    let th_f = th + 2.0 * a_half;

    let cs = (th.cos() + 4.0 * th_m.cos() + th_f.cos()) / 6.0;
    let sn = (th.sin() + 4.0 * th_m.sin() + th_f.sin()) / 6.0;
    // d cs / d omega and d sn / d omega (stage headings depend on omega).
    let dcs_dw = -ts * (2.0 * th_m.sin() + th_f.sin()) / 6.0;
    let dsn_dw = ts * (2.0 * th_m.cos() + th_f.cos()) / 6.0;

    let a = Matrix3::new(
        1.0,
        0.0,
        -ts * u.v * sn,
        0.0,
        1.0,
        ts * u.v * cs,
        0.0,
        0.0,
        1.0,
    );
    let b = Matrix3x2::new(
        ts * cs,
        ts * u.v * dcs_dw,
        ts * sn,
        ts * u.v * dsn_dw,
        0.0,
        ts,
    );
    Jacobians { a, b }
}
