//! Cart-pole plant: nonlinear dynamics with friction, plus the fixed
//! small-angle model used by the student and the state-dependent model used
//! by the teacher.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CartPoleParams {
    pub mass_cart: f64,
    pub mass_pole: f64,
    pub gravity: f64,
    /// Half length of the pole.
    pub half_length: f64,
    pub dt: f64,
    pub force_limit: f64,
    /// Cart friction coefficient (dimensionless, scaled by `friction_force_scale`).
    pub mu_cart: f64,
    pub mu_pole: f64,
    /// Newtons per unit of `mu_cart`.
    pub friction_force_scale: f64,
    /// Velocity scale of the tanh used in place of sgn(ẋ).
    pub friction_smoothing: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        CartPoleParams {
            mass_cart: 0.94,
            mass_pole: 0.23,
            gravity: 9.8,
            half_length: 0.32,
            dt: 1.0 / 30.0,
            force_limit: 30.0,
            mu_cart: 18.0,
            mu_pole: 0.0031,
            friction_force_scale: 0.15,
            friction_smoothing: 0.01,
        }
    }
}

impl CartPoleParams {
    pub fn frictionless() -> Self {
        CartPoleParams { mu_cart: 0.0, mu_pole: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass_cart", self.mass_cart),
            ("mass_pole", self.mass_pole),
            ("gravity", self.gravity),
            ("half_length", self.half_length),
            ("dt", self.dt),
            ("force_limit", self.force_limit),
            ("friction_smoothing", self.friction_smoothing),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("plant.{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("mu_cart", self.mu_cart), ("mu_pole", self.mu_pole), ("friction_force_scale", self.friction_force_scale)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("plant.{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn total_mass(&self) -> f64 {
        self.mass_cart + self.mass_pole
    }

    /// Cart friction force in newtons at cart velocity `v`.
    pub fn cart_friction(&self, v: f64) -> f64 {
        self.mu_cart * self.friction_force_scale * (v / self.friction_smoothing).tanh()
    }
}

/// `[x, v, θ, ω]`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub x: f64,
    pub v: f64,
    pub theta: f64,
    pub omega: f64,
}

impl PlantState {
    pub fn new(x: f64, v: f64, theta: f64, omega: f64) -> Self {
        PlantState { x, v, theta, omega }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0)
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&[self.x, self.v, self.theta, self.omega])
    }

    pub fn from_vector(s: &DVector<f64>) -> Result<Self> {
        if s.len() != STATE_DIM {
            return Err(Error::Structural(format!("cart-pole state has 4 entries, got {}", s.len())));
        }
        Ok(Self::new(s[0], s[1], s[2], s[3]))
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.v.is_finite() && self.theta.is_finite() && self.omega.is_finite()
    }
}

/// `(ẍ, θ̈)` at state `s` under total horizontal force `force`.
pub fn accelerations(s: &PlantState, force: f64, p: &CartPoleParams) -> (f64, f64) {
    let m = p.total_mass();
    let (mp, l, g) = (p.mass_pole, p.half_length, p.gravity);
    let (sin, cos) = s.theta.sin_cos();
    let fr = p.cart_friction(s.v);
    let temp = (-force - mp * l * s.omega * s.omega * sin + fr) / m;
    let pole_fric = p.mu_pole * s.omega / (mp * l);
    let theta_acc = (g * sin + cos * temp - pole_fric) / (l * (4.0 / 3.0 - mp * cos * cos / m));
    let x_acc = (force + mp * l * (s.omega * s.omega * sin - theta_acc * cos) - fr) / m;
    (x_acc, theta_acc)
}

/// One semi-implicit Euler step of length `dt`. The commanded force is
/// saturated at the actuator limit; the disturbance is not.
pub fn nonlinear_step(s: &PlantState, force: f64, p: &CartPoleParams, disturbance: f64) -> Result<PlantState> {
    let f = force.clamp(-p.force_limit, p.force_limit) + disturbance;
    let (x_acc, theta_acc) = accelerations(s, f, p);
    let v = s.v + p.dt * x_acc;
    let omega = s.omega + p.dt * theta_acc;
    let next = PlantState { x: s.x + p.dt * v, v, theta: s.theta + p.dt * omega, omega };
    if !next.is_finite() {
        return Err(Error::Divergence { step: 0, reason: "non-finite plant state".into() });
    }
    Ok(next)
}

/// sin(θ)/θ with the removable singularity filled in by its series.
fn sinc(theta: f64) -> f64 {
    if theta.abs() < 1e-4 {
        let t2 = theta * theta;
        1.0 - t2 / 6.0 + t2 * t2 / 120.0
    } else {
        theta.sin() / theta
    }
}

/// Continuous-time state-dependent model `ṡ = Â(s)·s + B̂(s)·F`.
pub fn continuous_model(s: &PlantState, p: &CartPoleParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = p.total_mass();
    let (mp, l, g) = (p.mass_pole, p.half_length, p.gravity);
    let (sin, cos) = s.theta.sin_cos();
    let sc = sinc(s.theta);
    let den = 4.0 / 3.0 * m - mp * cos * cos;
    let mut a = DMatrix::zeros(4, 4);
    a[(0, 1)] = 1.0;
    a[(1, 2)] = -mp * g * sc * cos / den;
    a[(1, 3)] = 4.0 / 3.0 * mp * l * sin * s.omega / den;
    a[(2, 3)] = 1.0;
    a[(3, 2)] = g * sc * m / (l * den);
    a[(3, 3)] = -mp * sin * cos * s.omega / den;
    let b = DMatrix::from_column_slice(4, 1, &[0.0, 4.0 / 3.0 / den, 0.0, -cos / (l * den)]);
    (a, b)
}

fn discretize(a_hat: DMatrix<f64>, b_hat: DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    (DMatrix::identity(4, 4) + a_hat * dt, b_hat * dt)
}

/// The student's fixed model: small-angle linearization, `A = I + T·Â`, `B = T·B̂`.
pub fn student_linearization(p: &CartPoleParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = p.total_mass();
    let (mp, l, g) = (p.mass_pole, p.half_length, p.gravity);
    let den = 4.0 / 3.0 * m - mp;
    let mut a = DMatrix::zeros(4, 4);
    a[(0, 1)] = 1.0;
    a[(1, 2)] = -mp * g / den;
    a[(2, 3)] = 1.0;
    a[(3, 2)] = g * m / (l * den);
    let b = DMatrix::from_column_slice(4, 1, &[0.0, 4.0 / 3.0 / den, 0.0, -1.0 / (l * den)]);
    discretize(a, b, p.dt)
}

/// The teacher's model `A(s) = I + T·Â(s)`, `B(s) = T·B̂(s)`.
pub fn teacher_linearization(s: &PlantState, p: &CartPoleParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let (a, b) = continuous_model(s, p);
    discretize(a, b, p.dt)
}

/// Mechanical energy with the pole potential measured from the pivot.
pub fn mechanical_energy(s: &PlantState, p: &CartPoleParams) -> f64 {
    let m = p.total_mass();
    let (mp, l, g) = (p.mass_pole, p.half_length, p.gravity);
    0.5 * m * s.v * s.v
        + mp * l * s.v * s.omega * s.theta.cos()
        + 2.0 / 3.0 * mp * l * l * s.omega * s.omega
        + mp * g * l * s.theta.cos()
}
