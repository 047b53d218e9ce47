//! Held-out rollout evaluation, the model zoo and the ablation studies.
//!
//! A model is judged by one open-loop rollout from the first logged state
//! under the logged commands. Nothing measured after `s_0` feeds back in.

mod report;
mod studies;
mod zoo;

use serde::{Deserialize, Serialize};

use crate::actuators::ModelFile;
use crate::dynamics::{simulate, JointState, PlantParams, StepConfig, TorqueSource};
use crate::error::{Error, Result};
use crate::excitation::HiddenModelSpec;
use crate::trajectory::Trajectory;

pub use report::{ComparisonReport, ComparisonRow};
pub use studies::{
    run_horizon_ablation, run_stability_study, run_w_sweep, AblationRow, StabilityRun, StabilityStudy, TraceQuantiles,
};
pub use zoo::{fit_family, Dataset, FitRequest, FittedModel, ModelFamily};

/// What the rollout is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reference {
    /// The noiseless hidden trace, when the log carries it.
    Truth,
    /// The logged, noisy angle.
    Measured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Rollout steps; the whole log when absent.
    pub horizon: Option<usize>,
    /// Steps per window of the dispersion statistics.
    pub window: usize,
    pub reference: Reference,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { horizon: None, window: 500, reference: Reference::Truth }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == Some(0) || self.window == 0 {
            return Err(Error::Config("evaluation horizon and window must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean |q_sim − q_ref| over the horizon, rad. Infinite if the rollout diverged.
    pub mae: f64,
    /// MAE of each window; the last window may be shorter.
    pub window_mae: Vec<f64>,
    pub steps: usize,
    pub divergence_step: Option<usize>,
}

impl EvalResult {
    pub fn window_mean(&self) -> f64 {
        if self.window_mae.is_empty() {
            return f64::INFINITY;
        }
        self.window_mae.iter().sum::<f64>() / self.window_mae.len() as f64
    }

    /// Population standard deviation over windows.
    pub fn window_std(&self) -> f64 {
        let n = self.window_mae.len();
        if n == 0 {
            return f64::INFINITY;
        }
        let m = self.window_mean();
        (self.window_mae.iter().map(|w| (w - m) * (w - m)).sum::<f64>() / n as f64).sqrt()
    }
}

/// MAE of a simulated angle trace against a reference, with per-window values.
pub fn mae_with_windows(sim: &[f64], reference: &[f64], window: usize) -> (f64, Vec<f64>) {
    debug_assert_eq!(sim.len(), reference.len());
    let err: Vec<f64> = sim.iter().zip(reference).map(|(a, b)| (a - b).abs()).collect();
    let mae = err.iter().sum::<f64>() / err.len() as f64;
    let windows = err.chunks(window.max(1)).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    (mae, windows)
}

/// Rolls `source` out over the log and scores the angle.
pub fn eval_source<S: TorqueSource<f64> + ?Sized>(
    source: &S,
    plant: &PlantParams,
    traj: &Trajectory,
    step: &StepConfig,
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    cfg.validate()?;
    let available = traj.len().saturating_sub(1);
    let h = cfg.horizon.unwrap_or(available);
    if h == 0 || h > available {
        return Err(Error::Usage(format!("evaluation horizon {h} does not fit a log of {} samples", traj.len())));
    }
    let reference: Vec<f64> = match cfg.reference {
        Reference::Measured => traj.q[1..=h].to_vec(),
        Reference::Truth => match &traj.truth {
            Some(t) => t[1..=h].iter().map(|s| s.q).collect(),
            None => return Err(Error::Usage("the log has no noiseless channel; evaluate against the measured angle".into())),
        },
    };
    let coeffs = plant.coeffs::<f64>();
    match simulate(traj.state(0), &traj.q_des[..h], 0, source, &coeffs, step.dt) {
        Ok(sim) => {
            let q: Vec<f64> = sim.iter().map(|s| s.q).collect();
            let (mae, window_mae) = mae_with_windows(&q, &reference, cfg.window);
            Ok(EvalResult { mae, window_mae, steps: h, divergence_step: None })
        }
        Err(e) => match e.root() {
            Error::Divergence { step } => {
                log::warn!("rollout diverged at step {step}");
                Ok(EvalResult { mae: f64::INFINITY, window_mae: vec![], steps: h, divergence_step: Some(*step) })
            }
            _ => Err(e),
        },
    }
}

/// Held-out MAE of a fitted model on its own plant.
pub fn eval_mae(model: &ModelFile, traj: &Trajectory, base: &PlantParams, step: &StepConfig, cfg: &EvalConfig) -> Result<EvalResult> {
    let plant = model.model.effective_plant(&model.plant(base));
    eval_source(&model.model, &plant, traj, step, cfg)
}

struct HiddenSource<'a>(&'a HiddenModelSpec);

impl TorqueSource<f64> for HiddenSource<'_> {
    fn torque(&self, step: usize, q_des: f64, s: &JointState) -> Result<f64> {
        self.0.torque(step, q_des, *s)
    }
}

/// The hidden reference actuator scored like any fitted model.
pub fn eval_hidden(hidden: &HiddenModelSpec, traj: &Trajectory, base: &PlantParams, step: &StepConfig, cfg: &EvalConfig) -> Result<EvalResult> {
    let plant = hidden.plant(base);
    eval_source(&HiddenSource(hidden), &plant, traj, step, cfg)
}
