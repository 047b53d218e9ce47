//! Experiment configuration: one TOML file with a section per stage.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected. All randomness derives from `seed` through
//! [`crate::seeds::derive_seed`] with a fixed tag per component.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::actuators::{PdParams, PwmPdParams, ServoParams};
use crate::dynamics::{PlantParams, StepConfig};
use crate::error::{Error, Result, ResultExt};
use crate::evaluation::{EvalConfig, ModelFamily};
use crate::excitation::{ExcitationSpec, HiddenActuator, HiddenModelSpec, StandSpec};
use crate::identification::{EsConfig, JointTerms, LossWeights, OptimizerConfig, SegmentationConfig, SupervisedConfig};
use crate::seeds::derive_seed;
use crate::ModelFile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Global seed.
    pub seed: u64,
    /// Where commands write their outputs unless `--out` is given.
    pub output_dir: PathBuf,
    pub plant: PlantParams,
    pub simulation: StepConfig,
    pub excitation: ExcitationConfig,
    pub dataset: DatasetConfig,
    pub hidden: HiddenConfig,
    pub stand: StandConfig,
    pub model: ModelConfig,
    pub segmentation: SegmentationConfig,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub es: EsConfig,
    pub nn: NnConfig,
    pub oracle: OracleConfig,
    pub bench: BenchConfig,
    pub evaluation: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            plant: PlantParams::default(),
            simulation: StepConfig::default(),
            excitation: ExcitationConfig::default(),
            dataset: DatasetConfig::default(),
            hidden: HiddenConfig::default(),
            stand: StandConfig::default(),
            model: ModelConfig::default(),
            segmentation: SegmentationConfig::default(),
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            es: EsConfig::default(),
            nn: NnConfig::default(),
            oracle: OracleConfig::default(),
            bench: BenchConfig::default(),
            evaluation: EvalConfig::default(),
        }
    }
}

/// Random Fourier excitation; the seed and duration come from elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExcitationConfig {
    pub num_modes_range: [usize; 2],
    pub amplitude_range: [f64; 2],
    pub frequency_range: [f64; 2],
    pub phase_range: [f64; 2],
    pub qdot_max: f64,
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        let s = ExcitationSpec::default();
        ExcitationConfig {
            num_modes_range: s.num_modes_range,
            amplitude_range: s.amplitude_range,
            frequency_range: s.frequency_range,
            phase_range: s.phase_range,
            qdot_max: s.qdot_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// s
    pub train_duration: f64,
    /// s
    pub test_duration: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { train_duration: 40.0, test_duration: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HiddenConfig {
    pub servo: ServoParams,
    /// A model file to use as the hidden actuator instead of the servo.
    pub model: Option<PathBuf>,
    /// rad
    pub q_noise_std: f64,
    /// rad/s
    pub qdot_noise_std: f64,
}

impl Default for HiddenConfig {
    fn default() -> Self {
        HiddenConfig { servo: ServoParams::default(), model: None, q_noise_std: 1e-4, qdot_noise_std: 1e-2 }
    }
}

/// Steady-state stand sweep for the supervised baseline; the seed is derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StandConfig {
    pub duty_levels: usize,
    pub load_levels: usize,
    pub load_fraction: f64,
    pub qdot_max: f64,
    pub tau_noise_std: f64,
    pub qdot_noise_std: f64,
}

impl Default for StandConfig {
    fn default() -> Self {
        let s = StandSpec::default();
        StandConfig {
            duty_levels: s.duty_levels,
            load_levels: s.load_levels,
            load_fraction: s.load_fraction,
            qdot_max: s.qdot_max,
            tau_noise_std: s.tau_noise_std,
            qdot_noise_std: s.qdot_noise_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelFamily,
    /// Starting point of the PD fits.
    pub pd_init: PdParams,
    /// Joint terms fitted next to the actuator model.
    pub joint: JointTerms,
    /// Multi-seed studies scale each initial PD parameter by
    /// `exp(U(−s, s))` with this `s`.
    pub init_scatter: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelFamily::TrajidParam,
            pd_init: PdParams { kp: 2.0, kv: 0.3, armature: 0.001 },
            joint: JointTerms::default(),
            init_scatter: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NnConfig {
    /// Full training-set loss cadence for network fits, which dominate cost.
    pub eval_every: usize,
}

impl Default for NnConfig {
    fn default() -> Self {
        NnConfig { eval_every: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Stride-1 overlapping windows (every torque is seen by up to N windows)
    /// or contiguous tiles.
    pub overlap: bool,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub eval_every: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { overlap: true, max_epochs: 3000, learning_rate: 1e-2, eval_every: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// PWM gains of the embedded loop; taken from the hidden servo when absent.
    pub pwm: Option<PwmPdParams>,
    pub supervised: SupervisedConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { pwm: None, supervised: SupervisedConfig::default() }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("config {}", path.display()))
    }

    /// The effective configuration with every default written out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.simulation.validate()?;
        self.train_excitation().validate()?;
        self.test_excitation().validate()?;
        self.segmentation.validate()?;
        self.weights.validate()?;
        self.optimizer.validate()?;
        self.evaluation.validate()?;
        self.hidden.servo.validate()?;
        self.stand_spec().validate()?;
        if self.nn.eval_every == 0 || self.oracle.eval_every == 0 || !(self.oracle.learning_rate > 0.0) {
            return Err(Error::Config("eval_every must be ≥ 1 and oracle.learning_rate > 0".into()));
        }
        if !(self.model.init_scatter >= 0.0) {
            return Err(Error::Config("model.init_scatter must be ≥ 0".into()));
        }
        if !(self.hidden.q_noise_std >= 0.0 && self.hidden.qdot_noise_std >= 0.0) {
            return Err(Error::Config("noise standard deviations must be ≥ 0".into()));
        }
        Ok(())
    }

    fn excitation(&self, duration: f64, tag: &str) -> ExcitationSpec {
        let e = &self.excitation;
        ExcitationSpec {
            num_modes_range: e.num_modes_range,
            amplitude_range: e.amplitude_range,
            frequency_range: e.frequency_range,
            phase_range: e.phase_range,
            qdot_max: e.qdot_max,
            duration,
            dt: self.simulation.dt,
            seed: derive_seed(self.seed, tag),
        }
    }

    pub fn train_excitation(&self) -> ExcitationSpec {
        self.excitation(self.dataset.train_duration, "train-excitation")
    }

    pub fn test_excitation(&self) -> ExcitationSpec {
        self.excitation(self.dataset.test_duration, "test-excitation")
    }

    pub fn stand_spec(&self) -> StandSpec {
        let s = &self.stand;
        StandSpec {
            duty_levels: s.duty_levels,
            load_levels: s.load_levels,
            load_fraction: s.load_fraction,
            qdot_max: s.qdot_max,
            tau_noise_std: s.tau_noise_std,
            qdot_noise_std: s.qdot_noise_std,
            seed: derive_seed(self.seed, "stand"),
        }
    }

    pub fn hidden_spec(&self) -> Result<HiddenModelSpec> {
        let actuator = match &self.hidden.model {
            Some(path) => HiddenActuator::Model(Box::new(ModelFile::load(path)?)),
            None => HiddenActuator::Servo(self.hidden.servo),
        };
        Ok(HiddenModelSpec { actuator, q_noise_std: self.hidden.q_noise_std, qdot_noise_std: self.hidden.qdot_noise_std })
    }

    /// PWM gains for the supervised baseline.
    pub fn bench_pwm(&self) -> PwmPdParams {
        self.bench.pwm.unwrap_or_else(|| self.hidden.servo.pwm_gains())
    }
}
