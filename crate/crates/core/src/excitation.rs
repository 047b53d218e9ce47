//! Command synthesis from random Fourier velocity profiles, and synthetic
//! "measured" datasets produced by a hidden actuator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::actuators::{ModelFile, ServoParams};
use crate::dynamics::{self, JointState, PlantParams, StepConfig};
use crate::error::{Error, Result};
use crate::seeds::derive_seed;
use crate::trajectory::Trajectory;

/// Ranges of the random velocity modes and the time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExcitationSpec {
    /// Inclusive range for the number of modes K.
    pub num_modes_range: [usize; 2],
    /// rad/s
    pub amplitude_range: [f64; 2],
    /// rad/s
    pub frequency_range: [f64; 2],
    /// rad, half-open
    pub phase_range: [f64; 2],
    /// rad/s
    pub qdot_max: f64,
    /// s
    pub duration: f64,
    /// s
    pub dt: f64,
    pub seed: u64,
}

impl Default for ExcitationSpec {
    fn default() -> Self {
        ExcitationSpec {
            num_modes_range: [3, 8],
            amplitude_range: [0.2, 2.0],
            frequency_range: [0.5, 15.0],
            phase_range: [0.0, std::f64::consts::TAU],
            qdot_max: 6.0,
            duration: 40.0,
            dt: 0.002,
            seed: 0,
        }
    }
}

impl ExcitationSpec {
    pub fn validate(&self) -> Result<()> {
        let [k0, k1] = self.num_modes_range;
        if k0 == 0 || k0 > k1 {
            return Err(Error::Config(format!("num_modes_range {:?} must be non-empty and ≥ 1", self.num_modes_range)));
        }
        for (name, [lo, hi]) in [
            ("amplitude_range", self.amplitude_range),
            ("frequency_range", self.frequency_range),
            ("phase_range", self.phase_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("{name} [{lo}, {hi}] is empty")));
            }
        }
        if !(self.qdot_max > 0.0) {
            return Err(Error::Config("qdot_max must be positive".into()));
        }
        self.samples().map(|_| ())
    }

    /// Number of samples `duration / dt`, which must be an integer.
    pub fn samples(&self) -> Result<usize> {
        if !(self.dt > 0.0 && self.duration > 0.0) {
            return Err(Error::Config("duration and dt must be positive".into()));
        }
        let n = (self.duration / self.dt).round();
        if (n * self.dt - self.duration).abs() > 1e-9 * self.duration.max(1.0) || n < 2.0 {
            return Err(Error::Config(format!(
                "duration {} s is not an integer multiple of dt {} s",
                self.duration, self.dt
            )));
        }
        Ok(n as usize)
    }
}

/// One term `A·sin(ω·t + φ)` of the velocity profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourierMode {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

/// A commanded position signal and the clipped velocity it integrates.
#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub dt: f64,
    pub q_des: Vec<f64>,
    pub qdot_des: Vec<f64>,
    pub modes: Vec<FourierMode>,
}

/// Velocity modes drawn uniformly from the spec's ranges.
pub fn sample_modes(spec: &ExcitationSpec) -> Vec<FourierMode> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [k0, k1] = spec.num_modes_range;
    let k = rng.gen_range(k0..=k1);
    let uniform = |rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]| if lo == hi { lo } else { rng.gen_range(lo..hi) };
    (0..k)
        .map(|_| FourierMode {
            amplitude: uniform(&mut rng, spec.amplitude_range),
            frequency: uniform(&mut rng, spec.frequency_range),
            phase: uniform(&mut rng, spec.phase_range),
        })
        .collect()
}

/// Evaluates the clipped velocity profile on `n` samples and integrates it by
/// the cumulative trapezoid rule, starting from zero.
pub fn command_from_modes(modes: &[FourierMode], qdot_max: f64, n: usize, dt: f64) -> Command {
    let qdot_des: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 * dt;
            let v: f64 = modes.iter().map(|m| m.amplitude * (m.frequency * t + m.phase).sin()).sum();
            v.clamp(-qdot_max, qdot_max)
        })
        .collect();
    let mut q_des = Vec::with_capacity(n);
    let mut q = 0.0;
    for i in 0..n {
        if i > 0 {
            q += 0.5 * dt * (qdot_des[i - 1] + qdot_des[i]);
        }
        q_des.push(q);
    }
    Command { dt, q_des, qdot_des, modes: modes.to_vec() }
}

pub fn synth_command(spec: &ExcitationSpec) -> Result<Command> {
    spec.validate()?;
    let n = spec.samples()?;
    Ok(command_from_modes(&sample_modes(spec), spec.qdot_max, n, spec.dt))
}

/// Ground truth standing in for the physical actuator.
#[derive(Debug, Clone, PartialEq)]
pub enum HiddenActuator {
    Servo(ServoParams),
    /// Any fitted or hand-built model, evaluated on its own plant.
    Model(Box<ModelFile>),
}

/// Hidden actuator plus additive Gaussian sensor noise.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenModelSpec {
    pub actuator: HiddenActuator,
    /// rad
    pub q_noise_std: f64,
    /// rad/s
    pub qdot_noise_std: f64,
}

impl HiddenModelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.q_noise_std >= 0.0 && self.qdot_noise_std >= 0.0) {
            return Err(Error::Config("noise standard deviations must be ≥ 0".into()));
        }
        match &self.actuator {
            HiddenActuator::Servo(s) => s.validate(),
            HiddenActuator::Model(m) => m.model.validate(),
        }
    }

    /// Plant the hidden actuator drives: its armature is part of the truth.
    pub fn plant(&self, base: &PlantParams) -> PlantParams {
        match &self.actuator {
            HiddenActuator::Servo(s) => PlantParams { armature: s.armature, ..base.clone() },
            HiddenActuator::Model(m) => m.plant(base),
        }
    }

    pub fn torque(&self, step: usize, q_des: f64, s: JointState) -> Result<f64> {
        match &self.actuator {
            HiddenActuator::Servo(p) => Ok(p.torque(q_des, s.q, s.qdot)),
            HiddenActuator::Model(m) => m.model.torque(step, q_des, s.q, s.qdot),
        }
    }
}

/// Noiseless closed-loop states `s_0..s_{n-1}` of the hidden actuator from
/// rest, where `s_{i+1}` follows from applying command `i` at `s_i`.
pub fn hidden_rollout(
    q_des: &[f64],
    hidden: &HiddenModelSpec,
    plant: &PlantParams,
    step: &StepConfig,
) -> Result<Vec<JointState>> {
    let plant = hidden.plant(plant);
    let mut states = Vec::with_capacity(q_des.len());
    let mut s = JointState::default();
    for (i, &c) in q_des.iter().enumerate() {
        states.push(s);
        if i + 1 == q_des.len() {
            break;
        }
        let tau = hidden.torque(i, c, s)?;
        s = dynamics::step(s, tau, &plant, step);
        if !s.is_finite() {
            return Err(Error::Divergence { step: i });
        }
    }
    Ok(states)
}

/// Synthetic measured log: the hidden actuator tracking a random command,
/// with independent Gaussian noise on the logged angle and velocity.
pub fn generate_dataset(
    spec: &ExcitationSpec,
    hidden: &HiddenModelSpec,
    plant: &PlantParams,
    step: &StepConfig,
) -> Result<Trajectory> {
    hidden.validate()?;
    if (spec.dt - step.dt).abs() > 1e-15 {
        return Err(Error::Config(format!("excitation dt {} differs from simulation dt {}", spec.dt, step.dt)));
    }
    let cmd = synth_command(spec)?;
    let truth = hidden_rollout(&cmd.q_des, hidden, plant, step)
        .map_err(|e| e.context(format!("hidden rollout for excitation seed {}", spec.seed)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "sensor-noise"));
    let nq = Normal::new(0.0, hidden.q_noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let nv = Normal::new(0.0, hidden.qdot_noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut q = Vec::with_capacity(truth.len());
    let mut qdot = Vec::with_capacity(truth.len());
    for s in &truth {
        q.push(s.q + nq.sample(&mut rng));
        qdot.push(s.qdot + nv.sample(&mut rng));
    }
    Ok(Trajectory { t0: 0.0, dt: spec.dt, q_des: cmd.q_des, q, qdot, truth: Some(truth) })
}

/// Steady-state operating points `(u, q̇) → τ` from a braked test stand.
#[derive(Debug, Clone, PartialEq)]
pub struct StandData {
    pub u: Vec<f64>,
    pub qdot: Vec<f64>,
    pub tau: Vec<f64>,
}

impl StandData {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["u", "qdot", "tau"])?;
        for i in 0..self.len() {
            w.write_record([self.u[i].to_string(), self.qdot[i].to_string(), self.tau[i].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != ["u", "qdot", "tau"] {
            return Err(Error::Parse(format!("stand data header must be u,qdot,tau in {}", path.display())));
        }
        let mut d = StandData { u: vec![], qdot: vec![], tau: vec![] };
        for rec in r.records() {
            let rec = rec?;
            let v: Vec<f64> = rec
                .iter()
                .map(|f| f.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad number {f:?} in stand data"))))
                .collect::<Result<_>>()?;
            d.u.push(v[0]);
            d.qdot.push(v[1]);
            d.tau.push(v[2]);
        }
        Ok(d)
    }
}

/// Grid of a stand sweep: constant duty, braking load swept up to a fraction
/// of stall torque, so the high-load low-speed corner is never measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StandSpec {
    pub duty_levels: usize,
    pub load_levels: usize,
    /// Largest braking load as a fraction of the stall torque.
    pub load_fraction: f64,
    /// Operating points faster than this are skipped, rad/s.
    pub qdot_max: f64,
    /// N·m
    pub tau_noise_std: f64,
    /// rad/s
    pub qdot_noise_std: f64,
    pub seed: u64,
}

impl Default for StandSpec {
    fn default() -> Self {
        StandSpec {
            duty_levels: 41,
            load_levels: 41,
            load_fraction: 0.75,
            qdot_max: 10.0,
            tau_noise_std: 2e-3,
            qdot_noise_std: 1e-2,
            seed: 0,
        }
    }
}

impl StandSpec {
    pub fn validate(&self) -> Result<()> {
        if self.duty_levels < 2 || self.load_levels < 2 {
            return Err(Error::Config("stand sweep needs at least two duty and load levels".into()));
        }
        if !(self.load_fraction > 0.0 && self.qdot_max > 0.0 && self.tau_noise_std >= 0.0 && self.qdot_noise_std >= 0.0) {
            return Err(Error::Config("stand sweep ranges must be positive".into()));
        }
        Ok(())
    }
}

/// Measures the servo's steady torque at each operating point. At steady
/// speed the load equals the motor torque, so the speed is
/// `(τ_lim·u − load) / b`.
pub fn generate_stand_data(servo: &ServoParams, spec: &StandSpec) -> Result<StandData> {
    servo.validate()?;
    spec.validate()?;
    if !(servo.backemf > 0.0) || servo.torque_limit.is_infinite() {
        return Err(Error::Config("stand sweeps need a finite torque limit and back-EMF > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "stand-noise"));
    let nt = Normal::new(0.0, spec.tau_noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let nv = Normal::new(0.0, spec.qdot_noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let cap = spec.load_fraction * servo.torque_limit;
    let mut d = StandData { u: vec![], qdot: vec![], tau: vec![] };
    for i in 0..spec.duty_levels {
        let u = -1.0 + 2.0 * i as f64 / (spec.duty_levels - 1) as f64;
        for j in 0..spec.load_levels {
            let load = -cap + 2.0 * cap * j as f64 / (spec.load_levels - 1) as f64;
            let qdot = (servo.torque_limit * u - load) / servo.backemf;
            if qdot.abs() > spec.qdot_max {
                continue;
            }
            let tau = servo.steady_torque(u, qdot);
            d.u.push(u);
            d.qdot.push(qdot + nv.sample(&mut rng));
            d.tau.push(tau + nt.sample(&mut rng));
        }
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn servo_spec(qn: f64, vn: f64) -> HiddenModelSpec {
        HiddenModelSpec { actuator: HiddenActuator::Servo(ServoParams::default()), q_noise_std: qn, qdot_noise_std: vn }
    }

    #[test]
    fn single_mode_matches_closed_form() {
        let dt = 0.002;
        let n = 5001;
        let c = command_from_modes(&[FourierMode { amplitude: 1.0, frequency: 1.0, phase: 0.0 }], 10.0, n, dt);
        let worst = (0..n).map(|i| (c.q_des[i] - (1.0 - (i as f64 * dt).cos())).abs()).fold(0.0, f64::max);
        // Trapezoid error over 10 s is bounded by T·dt²/12·max|q'''|.
        assert!(worst < 10.0 * dt * dt / 12.0 + 1e-12, "worst {worst}");
    }

    #[test]
    fn clipping_bounds_command_slope() {
        let spec = ExcitationSpec { amplitude_range: [5.0, 8.0], duration: 4.0, ..Default::default() };
        let c = synth_command(&spec).unwrap();
        let max_slope = c.q_des.windows(2).map(|w| (w[1] - w[0]).abs() / spec.dt).fold(0.0, f64::max);
        assert!(max_slope <= spec.qdot_max + 1e-9);
        assert!(c.qdot_des.iter().any(|v| v.abs() == spec.qdot_max));
    }

    #[test]
    fn same_seed_same_command() {
        let spec = ExcitationSpec { duration: 2.0, seed: 42, ..Default::default() };
        assert_eq!(synth_command(&spec).unwrap(), synth_command(&spec).unwrap());
        let other = ExcitationSpec { seed: 43, ..spec.clone() };
        assert_ne!(synth_command(&spec).unwrap().q_des, synth_command(&other).unwrap().q_des);
    }

    #[test]
    fn duration_must_divide() {
        let spec = ExcitationSpec { duration: 1.0005, ..Default::default() };
        let err = synth_command(&spec).unwrap_err();
        assert!(err.to_string().contains("integer multiple"));
    }

    #[test]
    fn default_lengths() {
        let train = ExcitationSpec::default();
        assert_eq!(train.samples().unwrap(), 20000);
        assert_eq!(ExcitationSpec { duration: 10.0, ..train }.samples().unwrap(), 5000);
    }

    #[test]
    fn zero_noise_logs_truth() {
        let spec = ExcitationSpec { duration: 1.0, seed: 3, ..Default::default() };
        let d = generate_dataset(&spec, &servo_spec(0.0, 0.0), &PlantParams::default(), &StepConfig::default()).unwrap();
        let truth = d.truth.as_ref().unwrap();
        assert!((0..d.len()).all(|i| d.q[i] == truth[i].q && d.qdot[i] == truth[i].qdot));
        assert_eq!(truth[0], JointState::default());
    }

    #[test]
    fn stand_data_is_capped_and_linear() {
        let servo = ServoParams::default();
        let spec = StandSpec { tau_noise_std: 0.0, qdot_noise_std: 0.0, ..Default::default() };
        let d = generate_stand_data(&servo, &spec).unwrap();
        assert!(!d.is_empty());
        for i in 0..d.len() {
            assert!(d.tau[i].abs() <= 0.75 * servo.torque_limit + 1e-12);
            assert!((d.tau[i] - servo.steady_torque(d.u[i], d.qdot[i])).abs() < 1e-12);
        }
    }
}
