//! Single-joint rod pendulum with MuJoCo-style joint terms.
//!
//! `q = 0` is the rod hanging straight down. The step is semi-implicit Euler:
//! velocity first, then position with the new velocity. Damping and smoothed
//! dry friction are integrated implicitly in velocity, the way MuJoCo treats
//! joint damping, which keeps stiff friction slopes (`frictionloss / ε`) stable
//! at `dt = 0.002`. With both terms zero the update is the plain explicit one.

use serde::{Deserialize, Serialize};

use crate::actuators::ActuatorModel;
use crate::autodiff::Real;
use crate::error::{Error, Result};

/// Joint angle (rad) and angular velocity (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointState<T = f64> {
    pub q: T,
    pub qdot: T,
}

impl<T> JointState<T> {
    pub fn new(q: T, qdot: T) -> Self {
        JointState { q, qdot }
    }
}

impl JointState<f64> {
    pub fn is_finite(&self) -> bool {
        self.q.is_finite() && self.qdot.is_finite()
    }

    /// Lifts a measured state into any scalar type as constants.
    pub fn lift<T: Real>(self) -> JointState<T> {
        JointState { q: T::cst(self.q), qdot: T::cst(self.qdot) }
    }
}

impl<T: Real> JointState<T> {
    pub fn value(&self) -> JointState<f64> {
        JointState { q: self.q.value(), qdot: self.qdot.value() }
    }
}

/// Rigid-body and joint parameters of the plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantParams {
    /// kg
    pub rod_mass: f64,
    /// m
    pub rod_length: f64,
    /// Pivot to center of mass, m.
    pub rod_com_distance: f64,
    /// About the pivot, kg·m².
    pub rod_inertia: f64,
    /// Reflected rotor inertia, kg·m².
    pub armature: f64,
    /// N·m·s/rad
    pub damping: f64,
    /// Dry friction magnitude, N·m.
    pub frictionloss: f64,
    /// m/s²
    pub gravity: f64,
    /// Velocity scale of the smoothed sign, rad/s.
    pub friction_smoothing: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams::uniform_rod(0.24, 0.352)
    }
}

impl PlantParams {
    /// A slender uniform rod pivoted at one end, with no joint terms.
    pub fn uniform_rod(mass: f64, length: f64) -> Self {
        PlantParams {
            rod_mass: mass,
            rod_length: length,
            rod_com_distance: 0.5 * length,
            rod_inertia: mass * length * length / 3.0,
            armature: 0.0,
            damping: 0.0,
            frictionloss: 0.0,
            gravity: 9.81,
            friction_smoothing: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("rod_mass", self.rod_mass >= 0.0),
            ("rod_length", self.rod_length >= 0.0),
            ("rod_com_distance", self.rod_com_distance >= 0.0),
            ("rod_inertia", self.rod_inertia > 0.0),
            ("armature", self.armature >= 0.0),
            ("damping", self.damping >= 0.0),
            ("frictionloss", self.frictionloss >= 0.0),
            ("friction_smoothing", self.friction_smoothing > 0.0),
            ("gravity", self.gravity.is_finite()),
        ];
        for (name, ok) in checks {
            let value = self.field(name);
            if !ok || !value.is_finite() {
                return Err(Error::Config(format!("plant.{name} = {value} is out of range")));
            }
        }
        Ok(())
    }

    fn field(&self, name: &str) -> f64 {
        match name {
            "rod_mass" => self.rod_mass,
            "rod_length" => self.rod_length,
            "rod_com_distance" => self.rod_com_distance,
            "rod_inertia" => self.rod_inertia,
            "armature" => self.armature,
            "damping" => self.damping,
            "frictionloss" => self.frictionloss,
            "friction_smoothing" => self.friction_smoothing,
            _ => self.gravity,
        }
    }

    /// m·g·c, the peak gravity torque.
    pub fn gravity_load(&self) -> f64 {
        self.rod_mass * self.gravity * self.rod_com_distance
    }

    pub fn total_inertia(&self) -> f64 {
        self.rod_inertia + self.armature
    }

    /// The coefficients a step needs, as constants of the scalar type.
    pub fn coeffs<T: Real>(&self) -> JointCoeffs<T> {
        JointCoeffs {
            inertia: T::cst(self.total_inertia()),
            damping: T::cst(self.damping),
            frictionloss: T::cst(self.frictionloss),
            gravity_load: self.gravity_load(),
            smoothing: self.friction_smoothing,
        }
    }

    /// Kinetic plus gravitational potential energy, zero at hanging rest.
    pub fn energy(&self, s: JointState) -> f64 {
        0.5 * self.total_inertia() * s.qdot * s.qdot + self.gravity_load() * (1.0 - s.q.cos())
    }
}

/// Simulation timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepConfig {
    /// s
    pub dt: f64,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig { dt: 0.002 }
    }
}

impl StepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("step.dt = {} must be positive", self.dt)));
        }
        Ok(())
    }
}

/// Plant coefficients in a particular scalar type. Inertia already includes
/// the armature. Fitted joint terms are tape variables; the rest are constants.
#[derive(Debug, Clone, Copy)]
pub struct JointCoeffs<T> {
    pub inertia: T,
    pub damping: T,
    pub frictionloss: T,
    pub gravity_load: f64,
    pub smoothing: f64,
}

/// −m·g·c·sin(q).
pub fn gravity_torque(q: f64, plant: &PlantParams) -> f64 {
    -plant.gravity_load() * q.sin()
}

/// tanh(v/ε).
pub fn smooth_sign(v: f64, smoothing: f64) -> f64 {
    (v / smoothing).tanh()
}

/// One step with `f64` coefficients taken from `plant`.
pub fn step(state: JointState, torque: f64, plant: &PlantParams, cfg: &StepConfig) -> JointState {
    step_with(state, torque, &plant.coeffs(), cfg.dt)
}

/// One integration step in any scalar type.
///
/// The velocity update solves
/// `v' = v + dt·(τ + τ_g(q) − d·v' − f·tanh(v'/ε)) / (I + a)`.
/// On a tape the root is attached through the implicit function theorem, so
/// gradients are exact for the solved equation without recording the Newton
/// iterations.
pub fn step_with<T: Real>(s: JointState<T>, torque: T, c: &JointCoeffs<T>, dt: f64) -> JointState<T> {
    let gravity = s.q.sin() * (-c.gravity_load);
    let free = s.qdot + (torque + gravity) * dt / c.inertia;
    let qdot = dissipate(free, c, dt);
    JointState { q: s.q + qdot * dt, qdot }
}

fn dissipate<T: Real>(free: T, c: &JointCoeffs<T>, dt: f64) -> T {
    let (d, f) = (c.damping.value(), c.frictionloss.value());
    let fixed_friction = c.frictionloss.is_constant();
    if d == 0.0 && f == 0.0 && fixed_friction && c.damping.is_constant() {
        return free;
    }
    let k = T::cst(dt) / c.inertia;
    if f == 0.0 && fixed_friction {
        return free / (k * c.damping + 1.0);
    }
    let kv = k.value();
    let eps = c.smoothing;
    let root = solve_velocity(free.value(), kv, d, f, eps);
    let sech2 = 1.0 - (root / eps).tanh().powi(2);
    let slope = 1.0 + kv * (d + f * sech2 / eps);
    let r = T::cst(root);
    let residual = free - (r + k * (c.damping * r + c.frictionloss * (r / eps).tanh()));
    r + residual / slope
}

/// Root of x + k·(d·x + f·tanh(x/ε)) = v. The left side is strictly increasing
/// and the root lies between 0 and v, so a bracketed Newton iteration always
/// converges.
fn solve_velocity(v: f64, k: f64, d: f64, f: f64, eps: f64) -> f64 {
    let g = |x: f64| x + k * (d * x + f * (x / eps).tanh()) - v;
    let (mut lo, mut hi) = if v >= 0.0 { (0.0, v) } else { (v, 0.0) };
    // Start from the solution without friction, clamped into the bracket.
    let mut x = (v / (1.0 + k * d)).clamp(lo, hi);
    for _ in 0..100 {
        let gx = g(x);
        if gx == 0.0 {
            return x;
        }
        if gx > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let t = (x / eps).tanh();
        let slope = 1.0 + k * (d + f * (1.0 - t * t) / eps);
        let mut next = x - gx / slope;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * (1.0 + x.abs()) || hi - lo <= 1e-15 * (1.0 + x.abs()) {
            return next;
        }
        x = next;
    }
    x
}

/// Anything that maps a commanded angle and the current state to a torque.
pub trait TorqueSource<T: Real> {
    /// `step` is the absolute index of the command within its trajectory.
    fn torque(&self, step: usize, q_des: f64, state: &JointState<T>) -> Result<T>;
}

impl TorqueSource<f64> for ActuatorModel {
    fn torque(&self, step: usize, q_des: f64, s: &JointState) -> Result<f64> {
        ActuatorModel::torque(self, step, q_des, s.q, s.qdot)
    }
}

/// Rolls `source` forward from `initial`, one state per command.
/// The command at position `i` carries absolute step index `first_step + i`.
pub fn simulate<T: Real, S: TorqueSource<T> + ?Sized>(
    initial: JointState<T>,
    commands: &[f64],
    first_step: usize,
    source: &S,
    coeffs: &JointCoeffs<T>,
    dt: f64,
) -> Result<Vec<JointState<T>>> {
    let mut out = Vec::with_capacity(commands.len());
    let mut s = initial;
    for (i, &q_des) in commands.iter().enumerate() {
        let tau = source.torque(first_step + i, q_des, &s)?;
        s = step_with(s, tau, coeffs, dt);
        if !(s.q.value().is_finite() && s.qdot.value().is_finite()) {
            return Err(Error::Divergence { step: first_step + i });
        }
        out.push(s);
    }
    Ok(out)
}

/// Open-loop rollout of a model from a measured initial state.
///
/// Returns `s'_1..s'_H` for `H` commands; the initial state is not repeated.
/// A Pd model's armature replaces the plant's.
pub fn rollout(
    initial: JointState,
    commands: &[f64],
    model: &ActuatorModel,
    plant: &PlantParams,
    cfg: &StepConfig,
) -> Result<Vec<JointState>> {
    if commands.is_empty() {
        return Err(Error::Usage("rollout needs at least one command".into()));
    }
    if !initial.is_finite() {
        return Err(Error::Usage("rollout initial state is not finite".into()));
    }
    let plant = model.effective_plant(plant);
    simulate(initial, commands, 0, model, &plant.coeffs(), cfg.dt)
}
