//! Segmented trajectory matching.
//!
//! A measured log is cut into short windows. Each window is rolled out from
//! its measured initial state under candidate parameters, and the loss is the
//! mean squared weighted state residual over all windows and steps.

pub mod adam;
pub mod es;
pub mod report;
pub mod supervised;

use std::ops::Range;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actuators::{ActuatorModel, ModelFile, PlantOverrides};
use crate::autodiff::{backward_prefix, GradientVector, Real, Tape, Var};
use crate::dynamics::{simulate, JointCoeffs, JointState, PlantParams, StepConfig, TorqueSource};
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;
use adam::Adam;
use es::MaEs;
pub use report::{EpochRecord, FitReport, FitSummary, Termination};
pub use supervised::{fit_bench_supervised, SupervisedConfig};

/// Segments per private tape. Fixed so the reduction order, and therefore the
/// result, does not depend on how many workers run.
const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Batching {
    /// `minibatch_size` segments drawn with replacement every epoch.
    Sampled,
    /// Every segment every epoch.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationConfig {
    /// Steps per segment, N.
    pub horizon: usize,
    /// Segments per minibatch, M.
    pub minibatch_size: usize,
    /// Stride-1 windows when true; contiguous tiles otherwise.
    pub overlap: bool,
    pub batching: Batching,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig { horizon: 3, minibatch_size: 2000, overlap: true, batching: Batching::Sampled }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.minibatch_size == 0 {
            return Err(Error::Config("segmentation horizon and minibatch_size must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Diagonal of W in the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_q: f64,
    pub w_qdot: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_q: 1.0, w_qdot: 0.0 }
    }
}

impl LossWeights {
    /// W = diag(α, 1 − α).
    pub fn from_alpha(alpha: f64) -> Self {
        LossWeights { w_q: alpha, w_qdot: 1.0 - alpha }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_q >= 0.0 && self.w_qdot >= 0.0) || (self.w_q == 0.0 && self.w_qdot == 0.0) {
            return Err(Error::Config(format!("loss weights must be ≥ 0 and not both zero: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    /// Full training-set loss is evaluated every this many epochs.
    pub eval_every: usize,
    /// Parameter snapshots are recorded only for models this small.
    pub snapshot_max_params: usize,
    /// Stop once this many minibatch loss evaluations have been spent.
    pub max_evaluations: Option<usize>,
    /// Worker threads for loss and gradient evaluation.
    #[serde(skip)]
    pub workers: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 3000,
            patience: 200,
            min_delta: 0.0,
            seed: 0,
            eval_every: 1,
            snapshot_max_params: 64,
            max_evaluations: None,
            workers: 1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("learning_rate must be > 0 and betas in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) || self.eval_every == 0 || self.min_delta.is_nan() || self.min_delta < 0.0 {
            return Err(Error::Config("epsilon > 0, eval_every ≥ 1 and min_delta ≥ 0 are required".into()));
        }
        Ok(())
    }
}

/// Settings of the gradient-free baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsConfig {
    /// λ; defaults to 4 + ⌊3 ln n⌋.
    pub population: Option<usize>,
    /// Initial step as a fraction of each coordinate's scale.
    pub sigma0: f64,
    pub max_generations: usize,
    pub max_evaluations: Option<usize>,
    /// Patience in generations.
    pub patience: usize,
    pub min_delta: f64,
    pub eval_every: usize,
    pub seed: u64,
    pub snapshot_max_params: usize,
    #[serde(skip)]
    pub workers: usize,
}

impl Default for EsConfig {
    fn default() -> Self {
        EsConfig {
            population: None,
            sigma0: 0.3,
            max_generations: 3000,
            max_evaluations: None,
            patience: 200,
            min_delta: 0.0,
            eval_every: 1,
            seed: 0,
            snapshot_max_params: 64,
            workers: 1,
        }
    }
}

/// A window of a trajectory rolled out from its measured start.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// Sample index of the initial state; also the absolute step of the first command.
    pub start: usize,
    pub initial: JointState,
    pub commands: Vec<f64>,
    pub targets: Vec<JointState>,
}

impl Segment {
    fn from_traj(traj: &Trajectory, start: usize, len: usize) -> Self {
        Segment {
            start,
            initial: traj.state(start),
            commands: traj.q_des[start..start + len].to_vec(),
            targets: (start + 1..=start + len).map(|i| traj.state(i)).collect(),
        }
    }
}

/// Overlapping stride-1 windows of `n` steps: `len − n` of them.
pub fn make_segments(traj: &Trajectory, n: usize) -> Result<Vec<Segment>> {
    if n == 0 || traj.len() <= n {
        return Err(Error::Usage(format!("a trajectory of {} samples is too short for segments of {n} steps", traj.len())));
    }
    Ok((0..traj.len() - n).map(|j| Segment::from_traj(traj, j, n)).collect())
}

/// Contiguous non-overlapping windows covering every transition once. The
/// last window is shorter when `n` does not divide the transition count.
pub fn make_windows(traj: &Trajectory, n: usize) -> Result<Vec<Segment>> {
    if n == 0 || traj.len() <= n {
        return Err(Error::Usage(format!("a trajectory of {} samples is too short for windows of {n} steps", traj.len())));
    }
    let steps = traj.len() - 1;
    Ok((0..steps).step_by(n).map(|j| Segment::from_traj(traj, j, n.min(steps - j))).collect())
}

pub fn segments_for(traj: &Trajectory, seg: &SegmentationConfig) -> Result<Vec<Segment>> {
    if seg.overlap {
        make_segments(traj, seg.horizon)
    } else {
        make_windows(traj, seg.horizon)
    }
}

/// Joint terms fitted next to the actuator model. `Some(x)` makes the term
/// trainable with initial value `x`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointTerms {
    pub armature: Option<f64>,
    pub damping: Option<f64>,
    pub frictionloss: Option<f64>,
}

/// The flat parameter vector z being fitted: the model's parameters followed
/// by any trainable joint terms (armature, damping, frictionloss in that order).
#[derive(Debug, Clone, PartialEq)]
pub struct Parameterization {
    pub model: ActuatorModel,
    pub joint: JointTerms,
    frozen: Vec<bool>,
}

impl Parameterization {
    pub fn new(model: ActuatorModel) -> Self {
        Self::with_joint(model, JointTerms::default()).expect("model-only parameterization is always valid")
    }

    pub fn with_joint(model: ActuatorModel, joint: JointTerms) -> Result<Self> {
        model.validate()?;
        if model.armature_index().is_some() && joint.armature.is_some() {
            return Err(Error::Usage("the PD model already owns the armature; do not fit it as a joint term too".into()));
        }
        let n = model.param_count() + [joint.armature, joint.damping, joint.frictionloss].iter().flatten().count();
        let mut p = Parameterization { model, joint, frozen: vec![false; n] };
        if matches!(p.model, ActuatorModel::Pd(_)) && p.joint.damping.is_some() {
            log::warn!("kv and joint damping both multiply q̇ and cannot be separated; freezing damping");
            p.freeze("damping")?;
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.frozen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frozen.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = self.model.param_names();
        for (name, v) in self.joint_slots() {
            if v.is_some() {
                names.push(name.to_string());
            }
        }
        names
    }

    fn joint_slots(&self) -> [(&'static str, Option<f64>); 3] {
        [("armature", self.joint.armature), ("damping", self.joint.damping), ("frictionloss", self.joint.frictionloss)]
    }

    /// Holds a parameter at its current value.
    pub fn freeze(&mut self, name: &str) -> Result<()> {
        let k = self
            .names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Usage(format!("no parameter named {name:?}")))?;
        self.frozen[k] = true;
        Ok(())
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        self.frozen.iter().map(|f| !f).collect()
    }

    pub fn initial(&self) -> Vec<f64> {
        let mut z = self.model.params();
        z.extend(self.joint_slots().iter().filter_map(|(_, v)| *v));
        z
    }

    pub fn lower_bounds(&self) -> Vec<f64> {
        let mut lb = self.model.lower_bounds();
        lb.extend(self.joint_slots().iter().filter(|(_, v)| v.is_some()).map(|_| 0.0));
        lb
    }

    /// Natural magnitude of each coordinate. The optimizers work on `z / scale`
    /// so a learning rate means the same relative step for gains and for
    /// inertias two orders of magnitude smaller.
    pub fn scales(&self) -> Vec<f64> {
        let mut s = match &self.model {
            ActuatorModel::Pd(_) => vec![1.0, 1.0, 0.01],
            m => vec![1.0; m.param_count()],
        };
        for (name, v) in self.joint_slots() {
            if v.is_some() {
                s.push(if name == "armature" { 0.01 } else { 0.1 });
            }
        }
        s
    }

    pub fn project(&self, z: &mut [f64]) {
        for (v, lb) in z.iter_mut().zip(self.lower_bounds()) {
            if *v < lb {
                *v = lb;
            }
        }
    }

    /// Parameters that the segments in `segs` can influence. Only a torque
    /// sequence has parameters tied to particular steps.
    fn active_range(&self, segs: &[&Segment]) -> Range<usize> {
        match &self.model {
            ActuatorModel::TorqueSequence(s) if !segs.is_empty() => {
                let lo = segs.iter().map(|g| g.start).min().unwrap_or(0).min(s.tau.len());
                let hi = segs.iter().map(|g| g.start + g.commands.len()).max().unwrap_or(0).min(s.tau.len());
                lo..hi.max(lo)
            }
            _ => 0..self.len(),
        }
    }

    /// Step coefficients with the plant terms routed from z.
    pub fn coeffs<T: Real>(&self, z: &[T], base: &PlantParams) -> JointCoeffs<T> {
        let mut c = base.coeffs::<T>();
        let mut k = self.model.param_count();
        let mut armature = T::cst(base.armature);
        if let Some(i) = self.model.armature_index() {
            armature = z[i];
        }
        if self.joint.armature.is_some() {
            armature = z[k];
            k += 1;
        }
        c.inertia = armature + base.rod_inertia;
        if self.joint.damping.is_some() {
            c.damping = z[k];
            k += 1;
        }
        if self.joint.frictionloss.is_some() {
            c.frictionloss = z[k];
        }
        c
    }

    /// The fitted model and plant overrides for parameters z.
    pub fn to_model_file(&self, z: &[f64], training_loss: Option<f64>) -> Result<ModelFile> {
        let m = self.model.param_count();
        let model = self.model.with_params(&z[..m])?;
        let mut k = m;
        let mut take = |on: bool| {
            on.then(|| {
                k += 1;
                z[k - 1]
            })
        };
        let plant = PlantOverrides {
            armature: take(self.joint.armature.is_some()),
            damping: take(self.joint.damping.is_some()),
            frictionloss: take(self.joint.frictionloss.is_some()),
        };
        Ok(ModelFile::new(model, plant, training_loss))
    }

    /// The same parameterization starting from z.
    pub fn at(&self, z: &[f64]) -> Result<Parameterization> {
        let f = self.to_model_file(z, None)?;
        let mut p = self.clone();
        p.model = f.model;
        let set = |slot: &mut Option<f64>, v: Option<f64>| {
            if slot.is_some() {
                *slot = v;
            }
        };
        set(&mut p.joint.armature, f.plant.armature);
        set(&mut p.joint.damping, f.plant.damping);
        set(&mut p.joint.frictionloss, f.plant.frictionloss);
        Ok(p)
    }
}

struct Bound<'a, T> {
    model: &'a ActuatorModel,
    z: &'a [T],
}

impl<T: Real> TorqueSource<T> for Bound<'_, T> {
    fn torque(&self, step: usize, q_des: f64, s: &JointState<T>) -> Result<T> {
        self.model.torque_with(self.z, step, q_des, s.q, s.qdot)
    }
}

/// Σ over steps of ‖W (s' − s)‖² for one segment, unnormalized.
fn segment_cost<T: Real>(
    p: &Parameterization,
    z: &[T],
    coeffs: &JointCoeffs<T>,
    seg: &Segment,
    w: &LossWeights,
    dt: f64,
) -> Result<T> {
    let model_z = &z[..p.model.param_count()];
    let sim = simulate(seg.initial.lift(), &seg.commands, seg.start, &Bound { model: &p.model, z: model_z }, coeffs, dt)?;
    let (wq2, wv2) = (w.w_q * w.w_q, w.w_qdot * w.w_qdot);
    let mut acc = T::cst(0.0);
    for (s, m) in sim.iter().zip(&seg.targets) {
        if wq2 != 0.0 {
            acc = acc + (s.q - m.q).square() * wq2;
        }
        if wv2 != 0.0 {
            acc = acc + (s.qdot - m.qdot).square() * wv2;
        }
    }
    Ok(acc)
}

/// Batch loss `(1/MN) Σ_j Σ_i ‖W (s'_ij − s_ij)‖²` in any scalar type. With
/// uneven windows the normalizer is the total number of steps.
pub fn batch_loss<T: Real>(
    p: &Parameterization,
    z: &[T],
    segments: &[&Segment],
    w: &LossWeights,
    plant: &PlantParams,
    step: &StepConfig,
) -> Result<T> {
    if segments.is_empty() {
        return Err(Error::Usage("batch loss needs at least one segment".into()));
    }
    if z.len() != p.len() {
        return Err(Error::Usage(format!("expected {} parameters, got {}", p.len(), z.len())));
    }
    let coeffs = p.coeffs(z, plant);
    let mut total = T::cst(0.0);
    let mut steps = 0usize;
    for (j, seg) in segments.iter().enumerate() {
        let c = segment_cost(p, z, &coeffs, seg, w, step.dt).map_err(|e| e.context(format!("segment {j} (start {})", seg.start)))?;
        total = total + c;
        steps += seg.commands.len();
    }
    Ok(total * (1.0 / steps as f64))
}

/// Loss and gradient over a segment set, evaluated in fixed-size chunks on
/// private tapes and reduced in chunk order.
pub struct Objective<'a> {
    pub param: &'a Parameterization,
    pub plant: &'a PlantParams,
    pub weights: LossWeights,
    pub step: StepConfig,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Objective<'a> {
    pub fn new(param: &'a Parameterization, plant: &'a PlantParams, weights: LossWeights, step: StepConfig, workers: usize) -> Result<Self> {
        weights.validate()?;
        let pool = if workers == 1 {
            None
        } else {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| Error::Config(format!("worker pool: {e}")))?,
            )
        };
        Ok(Objective { param, plant, weights, step, pool })
    }

    fn map_chunks<R: Send>(&self, segs: &[&Segment], f: impl Fn(usize, &[&Segment]) -> Result<R> + Sync) -> Result<Vec<R>> {
        let chunks: Vec<(usize, &[&Segment])> = segs.chunks(CHUNK).enumerate().map(|(i, c)| (i * CHUNK, c)).collect();
        match &self.pool {
            None => chunks.iter().map(|(o, c)| f(*o, c)).collect(),
            Some(pool) => pool.install(|| chunks.par_iter().map(|(o, c)| f(*o, c)).collect()),
        }
    }

    fn chunk_error(e: Error, offset: usize, k: usize, seg: &Segment) -> Error {
        e.context(format!("segment {} (start {})", offset + k, seg.start))
    }

    pub fn loss(&self, z: &[f64], segs: &[&Segment]) -> Result<f64> {
        if segs.is_empty() {
            return Err(Error::Usage("loss needs at least one segment".into()));
        }
        let coeffs = self.param.coeffs(z, self.plant);
        let parts = self.map_chunks(segs, |offset, chunk| {
            let mut acc = 0.0;
            for (k, seg) in chunk.iter().enumerate() {
                acc += segment_cost(self.param, z, &coeffs, seg, &self.weights, self.step.dt)
                    .map_err(|e| Self::chunk_error(e, offset, k, seg))?;
            }
            Ok(acc)
        })?;
        let steps: usize = segs.iter().map(|s| s.commands.len()).sum();
        Ok(parts.iter().sum::<f64>() / steps as f64)
    }

    pub fn loss_and_gradient(&self, z: &[f64], segs: &[&Segment]) -> Result<(f64, GradientVector)> {
        if segs.is_empty() {
            return Err(Error::Usage("loss needs at least one segment".into()));
        }
        let mask = self.param.trainable_mask();
        let parts = self.map_chunks(segs, |offset, chunk| {
            let active = self.param.active_range(chunk);
            let slots: Vec<usize> = active.clone().filter(|&i| mask[i]).collect();
            let tape = Tape::with_capacity(slots.len() + chunk.len() * 64);
            let leaves: Vec<Var<'_>> = slots.iter().map(|&i| tape.var(z[i])).collect();
            let mut vz: Vec<Var<'_>> = z.iter().map(|&v| Var::constant(v)).collect();
            for (&i, &leaf) in slots.iter().zip(&leaves) {
                vz[i] = leaf;
            }
            let coeffs = self.param.coeffs(&vz, self.plant);
            let mut acc = Var::constant(0.0);
            for (k, seg) in chunk.iter().enumerate() {
                let c = segment_cost(self.param, &vz, &coeffs, seg, &self.weights, self.step.dt)
                    .map_err(|e| Self::chunk_error(e, offset, k, seg))?;
                acc = acc + c;
            }
            let value = acc.value();
            let grad = if acc.node().is_some() { backward_prefix(&tape, acc, slots.len())?.0 } else { vec![0.0; slots.len()] };
            Ok((value, slots, grad))
        })?;
        let steps: usize = segs.iter().map(|s| s.commands.len()).sum();
        let inv = 1.0 / steps as f64;
        let mut grad = vec![0.0; z.len()];
        let mut total = 0.0;
        for (value, slots, g) in parts {
            total += value;
            for (i, gi) in slots.into_iter().zip(g) {
                grad[i] += gi;
            }
        }
        grad.iter_mut().for_each(|g| *g *= inv);
        Ok((total * inv, GradientVector(grad)))
    }
}

/// Fitted parameters and the trace that produced them.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub param: Parameterization,
    pub report: FitReport,
}

impl FitOutcome {
    pub fn model_file(&self) -> Result<ModelFile> {
        self.param.to_model_file(&self.report.best_params, Some(self.report.best_loss))
    }
}

struct BestTracker {
    best: f64,
    best_z: Vec<f64>,
    best_epoch: usize,
    last_improvement: usize,
    min_delta: f64,
}

impl BestTracker {
    fn offer(&mut self, epoch: usize, loss: f64, z: &[f64]) {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.best_z = z.to_vec();
            self.best_epoch = epoch;
            self.last_improvement = epoch;
        } else if loss < self.best {
            // Below min_delta: keep the better parameters without resetting patience.
            self.best = loss;
            self.best_z = z.to_vec();
            self.best_epoch = epoch;
        }
    }
}

fn non_finite(epoch: usize, detail: String, report: FitReport) -> Error {
    log::error!("fit aborted at epoch {epoch}: {detail}");
    Error::FitAborted { epoch, reason: detail, report: Box::new(report) }
}

/// Adam on the segmented loss with best-parameter retention and early stopping.
pub fn fit_gradient(
    init: &Parameterization,
    train: &Trajectory,
    seg: &SegmentationConfig,
    weights: &LossWeights,
    opt: &OptimizerConfig,
    plant: &PlantParams,
    step: &StepConfig,
) -> Result<FitOutcome> {
    seg.validate()?;
    opt.validate()?;
    let started = Instant::now();
    let segments = segments_for(train, seg)?;
    let all: Vec<&Segment> = segments.iter().collect();
    let obj = Objective::new(init, plant, *weights, *step, opt.workers.max(1))?;
    let mask = init.trainable_mask();
    let scales = init.scales();
    let mut z = init.initial();
    init.project(&mut z);
    let initial_loss = obj.loss(&z, &all)?;
    let names = init.names();
    let snapshot = z.len() <= opt.snapshot_max_params;
    let mut report = FitReport {
        method: "adam".into(),
        param_names: names,
        initial_params: z.clone(),
        initial_loss,
        epochs: Vec::new(),
        best_loss: initial_loss,
        best_epoch: 0,
        best_params: z.clone(),
        evaluations: 0,
        termination: Termination::MaxEpochs,
        wall_clock_s: 0.0,
    };
    if !initial_loss.is_finite() {
        return Err(non_finite(0, format!("initial loss is {initial_loss}"), report));
    }
    let mut tracker = BestTracker { best: initial_loss, best_z: z.clone(), best_epoch: 0, last_improvement: 0, min_delta: opt.min_delta };
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut adam = Adam::new(z.len(), opt.learning_rate, opt.beta1, opt.beta2, opt.epsilon);
    let mut u: Vec<f64> = z.iter().zip(&scales).map(|(v, s)| v / s).collect();
    let mut batch: Vec<&Segment> = Vec::with_capacity(seg.minibatch_size);

    for epoch in 1..=opt.max_epochs {
        if opt.max_evaluations.is_some_and(|m| report.evaluations >= m) {
            report.termination = Termination::Budget { evaluations: report.evaluations };
            break;
        }
        let batch_ref: &[&Segment] = match seg.batching {
            Batching::Full => &all,
            Batching::Sampled => {
                batch.clear();
                batch.extend((0..seg.minibatch_size).map(|_| all[rng.gen_range(0..all.len())]));
                &batch
            }
        };
        let (loss, grad) = obj.loss_and_gradient(&z, batch_ref).map_err(|e| e.context(format!("epoch {epoch}")))?;
        report.evaluations += 1;
        let gnorm = grad.norm();
        if !loss.is_finite() || !grad.is_finite() {
            report.epochs.push(EpochRecord { epoch, batch_loss: loss, full_loss: None, grad_norm: Some(gnorm), params: snapshot.then(|| z.clone()) });
            finish(&mut report, &tracker, started);
            return Err(non_finite(epoch, format!("minibatch loss {loss}, gradient norm {gnorm}"), report));
        }
        let gu: Vec<f64> = grad.0.iter().zip(&scales).map(|(g, s)| g * s).collect();
        adam.step(&mut u, &gu, &mask);
        for i in 0..z.len() {
            z[i] = u[i] * scales[i];
        }
        init.project(&mut z);
        for i in 0..z.len() {
            u[i] = z[i] / scales[i];
        }
        let full = if epoch % opt.eval_every == 0 || epoch == opt.max_epochs {
            let f = obj.loss(&z, &all).map_err(|e| e.context(format!("full-set loss at epoch {epoch}")))?;
            if !f.is_finite() {
                report.epochs.push(EpochRecord { epoch, batch_loss: loss, full_loss: Some(f), grad_norm: Some(gnorm), params: snapshot.then(|| z.clone()) });
                finish(&mut report, &tracker, started);
                return Err(non_finite(epoch, format!("full training-set loss {f}"), report));
            }
            tracker.offer(epoch, f, &z);
            Some(f)
        } else {
            None
        };
        report.epochs.push(EpochRecord { epoch, batch_loss: loss, full_loss: full, grad_norm: Some(gnorm), params: snapshot.then(|| z.clone()) });
        if epoch - tracker.last_improvement >= opt.patience {
            report.termination = Termination::Patience { epoch };
            break;
        }
    }
    finish(&mut report, &tracker, started);
    let param = init.at(&report.best_params)?;
    Ok(FitOutcome { param, report })
}

fn finish(report: &mut FitReport, tracker: &BestTracker, started: Instant) {
    report.best_loss = tracker.best;
    report.best_params = tracker.best_z.clone();
    report.best_epoch = tracker.best_epoch;
    report.wall_clock_s = started.elapsed().as_secs_f64();
}

/// Gradient-free fit of the same objective with MA-ES. One generation costs
/// λ minibatch loss evaluations, all on the same minibatch.
pub fn fit_es(
    init: &Parameterization,
    train: &Trajectory,
    seg: &SegmentationConfig,
    weights: &LossWeights,
    cfg: &EsConfig,
    plant: &PlantParams,
    step: &StepConfig,
) -> Result<FitOutcome> {
    seg.validate()?;
    if cfg.eval_every == 0 || !(cfg.sigma0 >= 0.0) {
        return Err(Error::Config("es.eval_every must be ≥ 1 and es.sigma0 ≥ 0".into()));
    }
    let started = Instant::now();
    let segments = segments_for(train, seg)?;
    let all: Vec<&Segment> = segments.iter().collect();
    let obj = Objective::new(init, plant, *weights, *step, cfg.workers.max(1))?;
    let mask = init.trainable_mask();
    let mut z0 = init.initial();
    init.project(&mut z0);
    let free: Vec<usize> = (0..z0.len()).filter(|&i| mask[i]).collect();
    let scales = init.scales();
    let initial_loss = obj.loss(&z0, &all)?;
    let snapshot = z0.len() <= cfg.snapshot_max_params;
    let mut report = FitReport {
        method: "ma-es".into(),
        param_names: init.names(),
        initial_params: z0.clone(),
        initial_loss,
        epochs: Vec::new(),
        best_loss: initial_loss,
        best_epoch: 0,
        best_params: z0.clone(),
        evaluations: 0,
        termination: Termination::MaxEpochs,
        wall_clock_s: 0.0,
    };
    if !initial_loss.is_finite() {
        return Err(non_finite(0, format!("initial loss is {initial_loss}"), report));
    }
    // Search in the free coordinates, scaled by each one's natural magnitude.
    let step_scale: Vec<f64> = free.iter().map(|&i| scales[i].max(z0[i].abs())).collect();
    let lambda = cfg.population.unwrap_or_else(|| MaEs::default_lambda(free.len()));
    let mean0: Vec<f64> = free.iter().map(|&i| z0[i]).collect();
    let mut es = MaEs::new(mean0, cfg.sigma0, step_scale, lambda, cfg.seed);
    let mut tracker = BestTracker { best: initial_loss, best_z: z0.clone(), best_epoch: 0, last_improvement: 0, min_delta: cfg.min_delta };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let mut batch: Vec<&Segment> = Vec::with_capacity(seg.minibatch_size);
    let assemble = |free_vals: &[f64]| {
        let mut z = z0.clone();
        for (&i, &v) in free.iter().zip(free_vals) {
            z[i] = v;
        }
        init.project(&mut z);
        z
    };

    for generation in 1..=cfg.max_generations {
        if cfg.max_evaluations.is_some_and(|m| report.evaluations + lambda > m) {
            report.termination = Termination::Budget { evaluations: report.evaluations };
            break;
        }
        let batch_ref: &[&Segment] = match seg.batching {
            Batching::Full => &all,
            Batching::Sampled => {
                batch.clear();
                batch.extend((0..seg.minibatch_size).map(|_| all[rng.gen_range(0..all.len())]));
                &batch
            }
        };
        let pop = es.ask();
        let mut fitness = Vec::with_capacity(pop.len());
        for cand in &pop {
            let f = obj.loss(&assemble(cand), batch_ref);
            // A diverging candidate is simply a bad one.
            fitness.push(match f {
                Ok(v) if v.is_finite() => v,
                _ => f64::INFINITY,
            });
        }
        report.evaluations += pop.len();
        let batch_loss = fitness.iter().copied().fold(f64::INFINITY, f64::min);
        es.tell(&fitness);
        let z = assemble(es.mean());
        let full = if generation % cfg.eval_every == 0 || generation == cfg.max_generations {
            let f = obj.loss(&z, &all).unwrap_or(f64::INFINITY);
            if f.is_finite() {
                tracker.offer(generation, f, &z);
            }
            Some(f)
        } else {
            None
        };
        report.epochs.push(EpochRecord { epoch: generation, batch_loss, full_loss: full, grad_norm: None, params: snapshot.then(|| z.clone()) });
        if !es.mean().iter().all(|v| v.is_finite()) || !es.sigma().is_finite() {
            finish(&mut report, &tracker, started);
            return Err(non_finite(generation, "search distribution became non-finite".into(), report));
        }
        if generation - tracker.last_improvement >= cfg.patience {
            report.termination = Termination::Patience { epoch: generation };
            break;
        }
    }
    finish(&mut report, &tracker, started);
    let param = init.at(&report.best_params)?;
    Ok(FitOutcome { param, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::excitation::{generate_dataset, ExcitationSpec, HiddenActuator, HiddenModelSpec};
    use crate::actuators::ServoParams;

    fn tiny_traj(n: usize) -> Trajectory {
        Trajectory {
            t0: 0.0,
            dt: 0.002,
            q_des: (0..n).map(|i| i as f64 * 0.01).collect(),
            q: (0..n).map(|i| i as f64 * 0.001).collect(),
            qdot: (0..n).map(|i| -(i as f64)).collect(),
            truth: None,
        }
    }

    fn pd_dataset(seconds: f64, noise: (f64, f64), seed: u64) -> Trajectory {
        let servo = ServoParams { torque_limit: f64::INFINITY, backemf: 0.0, ..ServoParams::default() };
        let hidden = HiddenModelSpec { actuator: HiddenActuator::Servo(servo), q_noise_std: noise.0, qdot_noise_std: noise.1 };
        let spec = ExcitationSpec { duration: seconds, seed, ..Default::default() };
        generate_dataset(&spec, &hidden, &PlantParams::default(), &StepConfig::default()).unwrap()
    }

    #[test]
    fn segment_counts_and_starts() {
        let t = tiny_traj(10);
        let s = make_segments(&t, 3).unwrap();
        assert_eq!(s.len(), 7);
        for (j, g) in s.iter().enumerate() {
            assert_eq!(g.initial, t.state(j));
            assert_eq!(g.commands, t.q_des[j..j + 3]);
            assert_eq!(g.targets[2], t.state(j + 3));
        }
        let one = make_segments(&t, 1).unwrap();
        assert!(one.iter().all(|g| g.commands.len() == 1 && g.targets.len() == 1));
        assert!(matches!(make_segments(&t, 10), Err(Error::Usage(_))));
        let w = make_windows(&t, 3).unwrap();
        assert_eq!(w.iter().map(|g| g.start).collect::<Vec<_>>(), vec![0, 3, 6]);
        let w4 = make_windows(&t, 4).unwrap();
        assert_eq!(w4.iter().map(|g| g.commands.len()).collect::<Vec<_>>(), vec![4, 4, 1]);
    }

    #[test]
    fn exact_parameters_give_zero_loss_and_gradient() {
        let t = pd_dataset(0.5, (0.0, 0.0), 1);
        let p = Parameterization::new(ActuatorModel::pd(3.684, 0.552, 0.00321));
        let segs = make_segments(&t, 3).unwrap();
        let refs: Vec<&Segment> = segs.iter().collect();
        let plant = PlantParams::default();
        let obj = Objective::new(&p, &plant, LossWeights::default(), StepConfig::default(), 1).unwrap();
        let (l, g) = obj.loss_and_gradient(&p.initial(), &refs).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn one_step_hand_loss() {
        // Zero-torque model, hanging rest start, one target 0.01 rad away.
        let traj = Trajectory { t0: 0.0, dt: 0.002, q_des: vec![0.0, 0.0], q: vec![0.0, 0.01], qdot: vec![0.0, 0.0], truth: None };
        let p = Parameterization::new(ActuatorModel::pd(0.0, 0.0, 0.0));
        let segs = make_segments(&traj, 1).unwrap();
        let refs: Vec<&Segment> = segs.iter().collect();
        let l: f64 = batch_loss(&p, &p.initial(), &refs, &LossWeights::default(), &PlantParams::default(), &StepConfig::default()).unwrap();
        assert!((l - 1e-4).abs() < 1e-18);
        let l2: f64 =
            batch_loss(&p, &p.initial(), &refs, &LossWeights { w_q: 2.0, w_qdot: 0.0 }, &PlantParams::default(), &StepConfig::default()).unwrap();
        assert!((l2 - 4.0 * l).abs() < 1e-18);
    }

    #[test]
    fn parallel_reduction_is_worker_independent() {
        let t = pd_dataset(0.4, (1e-4, 1e-2), 2);
        let p = Parameterization::new(ActuatorModel::pd(3.0, 0.4, 0.002));
        let segs = make_segments(&t, 3).unwrap();
        let refs: Vec<&Segment> = segs.iter().collect();
        let plant = PlantParams::default();
        let a = Objective::new(&p, &plant, LossWeights::default(), StepConfig::default(), 1).unwrap();
        let b = Objective::new(&p, &plant, LossWeights::default(), StepConfig::default(), 3).unwrap();
        let (la, ga) = a.loss_and_gradient(&p.initial(), &refs).unwrap();
        let (lb, gb) = b.loss_and_gradient(&p.initial(), &refs).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(ga, gb);
    }

    #[test]
    fn chunked_gradient_matches_single_tape() {
        let t = pd_dataset(0.3, (1e-4, 1e-2), 5);
        let plant = PlantParams::default();
        let p = Parameterization::with_joint(ActuatorModel::mlp(3), JointTerms { frictionloss: Some(0.05), ..Default::default() }).unwrap();
        let segs = make_segments(&t, 2).unwrap();
        let refs: Vec<&Segment> = segs.iter().take(40).collect();
        let obj = Objective::new(&p, &plant, LossWeights::from_alpha(0.5), StepConfig::default(), 1).unwrap();
        let z = p.initial();
        let (l, g) = obj.loss_and_gradient(&z, &refs).unwrap();
        let tape = Tape::new();
        let vz = tape.vars(&z);
        let loss = batch_loss(&p, &vz, &refs, &LossWeights::from_alpha(0.5), &plant, &StepConfig::default()).unwrap();
        let g2 = crate::autodiff::backward(&tape, loss, &vz).unwrap();
        assert!((l - loss.value()).abs() <= 1e-14 * l.abs());
        for (a, b) in g.0.iter().zip(&g2.0) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn damping_is_frozen_next_to_kv() {
        let p = Parameterization::with_joint(ActuatorModel::pd(1.0, 1.0, 0.0), JointTerms { damping: Some(0.1), ..Default::default() }).unwrap();
        assert_eq!(p.names(), vec!["kp", "kv", "armature", "damping"]);
        assert_eq!(p.trainable_mask(), vec![true, true, true, false]);
        assert!(Parameterization::with_joint(ActuatorModel::pd(1.0, 1.0, 0.0), JointTerms { armature: Some(0.0), ..Default::default() }).is_err());
    }

    #[test]
    fn infinite_min_delta_stops_after_patience() {
        let t = pd_dataset(0.5, (1e-4, 1e-2), 4);
        let p = Parameterization::new(ActuatorModel::pd(2.0, 0.3, 0.001));
        let opt = OptimizerConfig { patience: 7, min_delta: f64::INFINITY, max_epochs: 100, ..Default::default() };
        let seg = SegmentationConfig { minibatch_size: 50, ..Default::default() };
        let out = fit_gradient(&p, &t, &seg, &LossWeights::default(), &opt, &PlantParams::default(), &StepConfig::default()).unwrap();
        assert_eq!(out.report.epochs.len(), 7);
        assert_eq!(out.report.termination, Termination::Patience { epoch: 7 });
    }

    #[test]
    fn best_is_never_worse_than_initial_or_any_full_loss() {
        let t = pd_dataset(1.0, (1e-4, 1e-2), 6);
        let p = Parameterization::new(ActuatorModel::pd(2.0, 0.3, 0.001));
        let opt = OptimizerConfig { max_epochs: 60, ..Default::default() };
        let seg = SegmentationConfig { minibatch_size: 200, ..Default::default() };
        let out = fit_gradient(&p, &t, &seg, &LossWeights::default(), &opt, &PlantParams::default(), &StepConfig::default()).unwrap();
        let r = &out.report;
        assert!(r.best_loss <= r.initial_loss);
        assert!(r.epochs.iter().filter_map(|e| e.full_loss).all(|f| r.best_loss <= f));
        let again = fit_gradient(&p, &t, &seg, &LossWeights::default(), &opt, &PlantParams::default(), &StepConfig::default()).unwrap();
        assert_eq!(again.report.best_params, r.best_params);
        assert_eq!(again.report.epochs, r.epochs);
    }

    #[test]
    fn es_single_candidate_zero_step_is_inert() {
        let t = pd_dataset(0.3, (1e-4, 1e-2), 7);
        let p = Parameterization::new(ActuatorModel::pd(2.0, 0.3, 0.001));
        let cfg = EsConfig { population: Some(1), sigma0: 0.0, max_generations: 15, ..Default::default() };
        let seg = SegmentationConfig { minibatch_size: 30, ..Default::default() };
        let out = fit_es(&p, &t, &seg, &LossWeights::default(), &cfg, &PlantParams::default(), &StepConfig::default()).unwrap();
        assert!(out.report.epochs.iter().all(|e| e.params.as_deref() == Some(&[2.0, 0.3, 0.001][..])));
        assert_eq!(out.report.best_params, vec![2.0, 0.3, 0.001]);
    }

    #[test]
    fn torque_oracle_reaches_loss_floor_on_noiseless_windows() {
        let t = pd_dataset(0.2, (0.0, 0.0), 8);
        let p = Parameterization::new(ActuatorModel::torque_sequence(vec![0.0; t.len() - 1], 3));
        let seg = SegmentationConfig { horizon: 3, overlap: false, batching: Batching::Full, ..Default::default() };
        let opt = OptimizerConfig { max_epochs: 3000, patience: 3000, ..Default::default() };
        let out = fit_gradient(&p, &t, &seg, &LossWeights::default(), &opt, &PlantParams::default(), &StepConfig::default()).unwrap();
        assert!(out.report.best_loss < 1e-12, "loss {}", out.report.best_loss);
    }
}
