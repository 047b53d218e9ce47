//! The actuator model zoo.
//!
//! Every model maps `(q_des, q, q̇)` to a joint torque with no internal state.
//! Models expose a flat parameter vector so the optimizers can treat them
//! uniformly, and [`ActuatorModel::torque_with`] evaluates the model with
//! parameters of any scalar type.

pub mod mlp;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::dynamics::PlantParams;
use crate::error::{Error, Result};
pub use mlp::{Mlp, Normalizer};

pub const NN_SIZES: [usize; 4] = [3, 32, 32, 1];
pub const BENCH_SIZES: [usize; 4] = [2, 128, 64, 1];
/// Fixed PD regulator of residual-action models.
pub const RESIDUAL_KP: f64 = 5.0;
pub const RESIDUAL_KV: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdParams {
    /// N·m/rad
    pub kp: f64,
    /// N·m·s/rad
    pub kv: f64,
    /// kg·m², replaces the plant armature during rollout.
    pub armature: f64,
}

/// Dimensionless gains of the embedded PWM loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PwmPdParams {
    #[serde(rename = "Kp")]
    pub kp: f64,
    #[serde(rename = "Kd")]
    pub kd: f64,
}

/// Free per-timestep torques, indexed by absolute step of the trajectory they
/// were fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TorqueSequence {
    pub tau: Vec<f64>,
    /// Rollout horizon used while fitting.
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ActuatorModel {
    Pd(PdParams),
    Mlp { net: Mlp },
    TorqueSequence(TorqueSequence),
    BenchSup { pwm: PwmPdParams, map: Mlp },
    /// Network output is a command correction fed to a fixed PD regulator.
    Residual { net: Mlp },
}

/// τ = kp·(q_des − q) − kv·q̇
pub fn pd_torque<T: Real>(q_des: f64, q: T, qdot: T, kp: T, kv: T) -> T {
    kp * (T::cst(q_des) - q) - kv * qdot
}

/// u = clip(Kp·(q_des − q) − Kd·q̇, −1, 1)
pub fn pwm_duty<T: Real>(q_des: f64, q: T, qdot: T, kp: T, kd: T) -> T {
    (kp * (T::cst(q_des) - q) - kd * qdot).clip(-1.0, 1.0)
}

/// Fixed regulator applied to the corrected command `q_des + δa`.
pub fn residual_torque<T: Real>(da: T, q_des: f64, q: T, qdot: T) -> T {
    (da + (T::cst(q_des) - q)) * RESIDUAL_KP - qdot * RESIDUAL_KV
}

pub fn oracle_torque(step: usize, seq: &TorqueSequence) -> Result<f64> {
    seq.tau.get(step).copied().ok_or_else(|| {
        Error::Usage(format!("torque sequence has {} entries, step {step} requested", seq.tau.len()))
    })
}

impl ActuatorModel {
    pub fn pd(kp: f64, kv: f64, armature: f64) -> Self {
        ActuatorModel::Pd(PdParams { kp, kv, armature })
    }

    /// TrajID-NN network with Glorot weights and an identity normalizer.
    pub fn mlp(seed: u64) -> Self {
        ActuatorModel::Mlp { net: Mlp::glorot(&NN_SIZES, seed).with_normalizer(Normalizer::identity(3)) }
    }

    pub fn residual(seed: u64) -> Self {
        let mut net = Mlp::glorot(&NN_SIZES, seed).with_normalizer(Normalizer::identity(3));
        // Start from the plain regulator: zero output layer.
        let n = net.params.len();
        net.params[n - 33..].iter_mut().for_each(|w| *w = 0.0);
        ActuatorModel::Residual { net }
    }

    pub fn torque_sequence(tau: Vec<f64>, horizon: usize) -> Self {
        ActuatorModel::TorqueSequence(TorqueSequence { tau, horizon })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ActuatorModel::Pd(_) => "pd",
            ActuatorModel::Mlp { .. } => "mlp",
            ActuatorModel::TorqueSequence(_) => "torque-sequence",
            ActuatorModel::BenchSup { .. } => "bench-sup",
            ActuatorModel::Residual { .. } => "residual",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ActuatorModel::Pd(p) => {
                if [p.kp, p.kv, p.armature].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::Usage(format!("PD parameters must be finite and non-negative: {p:?}")));
                }
                Ok(())
            }
            ActuatorModel::Mlp { net } | ActuatorModel::Residual { net } => {
                net.validate()?;
                if net.sizes[0] != 3 {
                    return Err(Error::Usage("torque networks take three inputs".into()));
                }
                Ok(())
            }
            ActuatorModel::TorqueSequence(s) => {
                if s.horizon == 0 || s.tau.iter().any(|t| !t.is_finite()) {
                    return Err(Error::Usage("torque sequence needs horizon ≥ 1 and finite entries".into()));
                }
                Ok(())
            }
            ActuatorModel::BenchSup { pwm, map } => {
                map.validate()?;
                if map.sizes[0] != 2 || !(pwm.kp >= 0.0 && pwm.kd >= 0.0) {
                    return Err(Error::Usage("bench map takes (u, q̇) and PWM gains must be ≥ 0".into()));
                }
                Ok(())
            }
        }
    }

    /// Flattened parameter vector.
    pub fn params(&self) -> Vec<f64> {
        match self {
            ActuatorModel::Pd(p) => vec![p.kp, p.kv, p.armature],
            ActuatorModel::Mlp { net } | ActuatorModel::Residual { net } => net.params.clone(),
            ActuatorModel::TorqueSequence(s) => s.tau.clone(),
            ActuatorModel::BenchSup { pwm, map } => {
                let mut v = vec![pwm.kp, pwm.kd];
                v.extend_from_slice(&map.params);
                v
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            ActuatorModel::Pd(_) => 3,
            ActuatorModel::Mlp { net } | ActuatorModel::Residual { net } => net.params.len(),
            ActuatorModel::TorqueSequence(s) => s.tau.len(),
            ActuatorModel::BenchSup { map, .. } => 2 + map.params.len(),
        }
    }

    /// A copy with the flat parameters replaced.
    pub fn with_params(&self, z: &[f64]) -> Result<Self> {
        if z.len() != self.param_count() {
            return Err(Error::Usage(format!(
                "{} model takes {} parameters, got {}",
                self.kind(),
                self.param_count(),
                z.len()
            )));
        }
        let mut m = self.clone();
        match &mut m {
            ActuatorModel::Pd(p) => *p = PdParams { kp: z[0], kv: z[1], armature: z[2] },
            ActuatorModel::Mlp { net } | ActuatorModel::Residual { net } => net.params.copy_from_slice(z),
            ActuatorModel::TorqueSequence(s) => s.tau.copy_from_slice(z),
            ActuatorModel::BenchSup { pwm, map } => {
                *pwm = PwmPdParams { kp: z[0], kd: z[1] };
                map.params.copy_from_slice(&z[2..]);
            }
        }
        Ok(m)
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            ActuatorModel::Pd(_) => vec!["kp".into(), "kv".into(), "armature".into()],
            ActuatorModel::TorqueSequence(s) => (0..s.tau.len()).map(|i| format!("tau{i}")).collect(),
            ActuatorModel::BenchSup { map, .. } => {
                let mut v = vec!["Kp".to_string(), "Kd".to_string()];
                v.extend((0..map.params.len()).map(|i| format!("w{i}")));
                v
            }
            _ => (0..self.param_count()).map(|i| format!("w{i}")).collect(),
        }
    }

    /// Lower bounds of the flat parameters; physical quantities are ≥ 0.
    pub fn lower_bounds(&self) -> Vec<f64> {
        match self {
            ActuatorModel::Pd(_) => vec![0.0; 3],
            ActuatorModel::BenchSup { map, .. } => {
                let mut v = vec![0.0, 0.0];
                v.extend(std::iter::repeat(f64::NEG_INFINITY).take(map.params.len()));
                v
            }
            _ => vec![f64::NEG_INFINITY; self.param_count()],
        }
    }

    /// Index of the armature in the flat vector, when the model owns one.
    pub fn armature_index(&self) -> Option<usize> {
        matches!(self, ActuatorModel::Pd(_)).then_some(2)
    }

    /// The plant as this model sees it: a Pd model's armature replaces the plant's.
    pub fn effective_plant(&self, plant: &PlantParams) -> PlantParams {
        match self {
            ActuatorModel::Pd(p) => PlantParams { armature: p.armature, ..plant.clone() },
            _ => plant.clone(),
        }
    }

    /// Torque with the model's own parameters.
    pub fn torque(&self, step: usize, q_des: f64, q: f64, qdot: f64) -> Result<f64> {
        match self {
            ActuatorModel::Pd(p) => Ok(pd_torque(q_des, q, qdot, p.kp, p.kv)),
            ActuatorModel::Mlp { net } => net.forward(&[q_des, q, qdot]),
            ActuatorModel::TorqueSequence(s) => oracle_torque(step, s),
            ActuatorModel::BenchSup { pwm, map } => {
                let u = pwm_duty(q_des, q, qdot, pwm.kp, pwm.kd);
                map.forward(&[u, qdot])
            }
            ActuatorModel::Residual { net } => {
                let da = net.forward(&[q_des, q, qdot])?;
                Ok(residual_torque(da, q_des, q, qdot))
            }
        }
    }

    /// Torque with externally supplied flat parameters, which may be tape
    /// variables. The layout is that of [`ActuatorModel::params`].
    pub fn torque_with<T: Real>(&self, z: &[T], step: usize, q_des: f64, q: T, qdot: T) -> Result<T> {
        if z.len() != self.param_count() {
            return Err(Error::Usage(format!("{} model expects {} parameters", self.kind(), self.param_count())));
        }
        match self {
            ActuatorModel::Pd(_) => Ok(pd_torque(q_des, q, qdot, z[0], z[1])),
            ActuatorModel::Mlp { net } => net.forward_with(z, &[T::cst(q_des), q, qdot]),
            ActuatorModel::TorqueSequence(s) => {
                if step >= s.tau.len() {
                    return Err(Error::Usage(format!("torque sequence has {} entries, step {step} requested", s.tau.len())));
                }
                Ok(z[step])
            }
            ActuatorModel::BenchSup { map, .. } => {
                let u = pwm_duty(q_des, q, qdot, z[0], z[1]);
                map.forward_with(&z[2..], &[u, qdot])
            }
            ActuatorModel::Residual { net } => {
                let da = net.forward_with(z, &[T::cst(q_des), q, qdot])?;
                Ok(residual_torque(da, q_des, q, qdot))
            }
        }
    }
}

/// Servo with a saturated PWM stage and back-EMF, standing in for hardware.
///
/// Unsaturated it is exactly the PD law `kp·e − kv·q̇`. The duty is
/// `u = clip((kp·e − (kv − b)·q̇) / τ_lim, −1, 1)` and the torque is
/// `τ_lim·u − b·q̇`, so the steady map `(u, q̇) ↦ τ` is linear and the matching
/// PWM gains are `Kp = kp/τ_lim`, `Kd = (kv − b)/τ_lim`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServoParams {
    pub kp: f64,
    pub kv: f64,
    /// kg·m²
    pub armature: f64,
    /// Stall torque at full duty, N·m. Infinite means no saturation.
    pub torque_limit: f64,
    /// Back-EMF torque per unit speed, N·m·s/rad.
    pub backemf: f64,
}

impl Default for ServoParams {
    fn default() -> Self {
        ServoParams { kp: 3.684, kv: 0.552, armature: 0.00321, torque_limit: 0.6, backemf: 0.1 }
    }
}

impl ServoParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.kp >= 0.0
            && self.kv >= 0.0
            && self.armature >= 0.0
            && self.torque_limit > 0.0
            && self.backemf >= 0.0
            && self.backemf <= self.kv
            && [self.kp, self.kv, self.armature, self.backemf].iter().all(|v| v.is_finite());
        if !ok {
            return Err(Error::Config(format!(
                "hidden servo needs kp, kv, armature ≥ 0, torque_limit > 0 and 0 ≤ backemf ≤ kv: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn pwm_gains(&self) -> PwmPdParams {
        if self.torque_limit.is_infinite() {
            return PwmPdParams { kp: 0.0, kd: 0.0 };
        }
        PwmPdParams { kp: self.kp / self.torque_limit, kd: (self.kv - self.backemf) / self.torque_limit }
    }

    pub fn duty(&self, q_des: f64, q: f64, qdot: f64) -> f64 {
        let pwm = self.pwm_gains();
        pwm_duty(q_des, q, qdot, pwm.kp, pwm.kd)
    }

    /// Steady torque at duty `u` and speed `qdot`.
    pub fn steady_torque(&self, u: f64, qdot: f64) -> f64 {
        self.torque_limit * u - self.backemf * qdot
    }

    pub fn torque(&self, q_des: f64, q: f64, qdot: f64) -> f64 {
        if self.torque_limit.is_infinite() {
            return pd_torque(q_des, q, qdot, self.kp, self.kv);
        }
        self.steady_torque(self.duty(q_des, q, qdot), qdot)
    }

    /// The PD model this servo reduces to without saturation.
    pub fn as_pd(&self) -> ActuatorModel {
        ActuatorModel::pd(self.kp, self.kv, self.armature)
    }
}

const MODEL_FORMAT: &str = "trajid-model";

/// On-disk form of a fitted model plus the plant terms fitted alongside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub model: ActuatorModel,
    #[serde(default)]
    pub plant: PlantOverrides,
    /// Best full-training-set loss reached while fitting, if known.
    #[serde(default)]
    pub training_loss: Option<f64>,
}

/// Joint terms fitted together with a model; unset fields keep the base plant.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantOverrides {
    pub armature: Option<f64>,
    pub damping: Option<f64>,
    pub frictionloss: Option<f64>,
}

impl PlantOverrides {
    pub fn apply(&self, plant: &PlantParams) -> PlantParams {
        PlantParams {
            armature: self.armature.unwrap_or(plant.armature),
            damping: self.damping.unwrap_or(plant.damping),
            frictionloss: self.frictionloss.unwrap_or(plant.frictionloss),
            ..plant.clone()
        }
    }
}

impl ModelFile {
    pub fn new(model: ActuatorModel, plant: PlantOverrides, training_loss: Option<f64>) -> Self {
        ModelFile { format: MODEL_FORMAT.into(), version: 1, model, plant, training_loss }
    }

    /// Plant the model is evaluated against.
    pub fn plant(&self, base: &PlantParams) -> PlantParams {
        self.model.effective_plant(&self.plant.apply(base))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(text)?;
        if f.format != MODEL_FORMAT {
            return Err(Error::Parse(format!("not a model file (format {:?})", f.format)));
        }
        if f.version != 1 {
            return Err(Error::Parse(format!("unsupported model file version {}", f.version)));
        }
        f.model.validate()?;
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| e.context(format!("reading {}", path.display())))
    }
}
