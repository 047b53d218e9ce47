//! Central finite differences with one Richardson step, used as an
//! independent oracle for the tape gradients. Only plain `f64` loss
//! evaluations are involved.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajid_core::config::ExperimentConfig;
use trajid_core::evaluation::Dataset;
use trajid_core::identification::{make_segments, Objective, Parameterization, Segment};
use trajid_core::{ActuatorModel, PdParams};

/// Richardson-extrapolated central difference of `f` at `x` along coordinate `i`.
pub fn derivative(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let central = |h: f64| {
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[i] += h;
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    };
    (4.0 * central(0.5 * h) - central(h)) / 3.0
}

/// Richardson differences on a ladder of steps `h0 / 4^k`; returns the value
/// where two neighbours agree best. Large steps suffer truncation and cross
/// ReLU kinks, small ones suffer roundoff; the plateau between is kept.
pub fn settled_derivative(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h0: f64) -> f64 {
    let ladder: Vec<f64> = (0..7).map(|k| derivative(f, x, i, h0 / 4f64.powi(k))).collect();
    let k = (0..ladder.len() - 1)
        .min_by(|&a, &b| (ladder[a] - ladder[a + 1]).abs().total_cmp(&(ladder[b] - ladder[b + 1]).abs()))
        .unwrap();
    ladder[k + 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradModel {
    Param,
    Nn,
    Oracle,
}

/// Worst per-coordinate relative error between the tape gradient and finite
/// differences, with the number of coordinates compared.
#[derive(Debug)]
pub struct GradCheck {
    pub coordinates: usize,
    pub worst: f64,
    pub worst_at: usize,
}

fn relative(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Checks the gradient of the batch loss for one model at a random point of
/// parameter space, on a noisy dataset generated from `seed`.
pub fn check_gradient(model: GradModel, seed: u64) -> GradCheck {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.dataset.train_duration = 2.0;
    cfg.dataset.test_duration = 2.0;
    let data = Dataset::generate(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);

    let (actuator, traj) = match model {
        GradModel::Param => (
            ActuatorModel::Pd(PdParams { kp: rng.gen_range(1.0..6.0), kv: rng.gen_range(0.1..1.0), armature: rng.gen_range(1e-3..1e-2) }),
            &data.train,
        ),
        GradModel::Nn => (ActuatorModel::mlp(seed), &data.train),
        GradModel::Oracle => {
            let tau = (0..data.test.len() - 1).map(|_| rng.gen_range(-0.3..0.3)).collect();
            (ActuatorModel::torque_sequence(tau, 3), &data.test)
        }
    };
    let param = Parameterization::new(actuator);
    let segments = make_segments(traj, 3).unwrap();
    let batch: Vec<&Segment> = segments.choose_multiple(&mut rng, 256).collect();
    let objective = Objective::new(&param, &cfg.plant, cfg.weights, cfg.simulation, 1).unwrap();

    let z = param.initial();
    let (_, grad) = objective.loss_and_gradient(&z, &batch).unwrap();
    let grad = grad.0;
    let coords: Vec<usize> = match model {
        GradModel::Param => (0..z.len()).collect(),
        GradModel::Nn => rand::seq::index::sample(&mut rng, z.len(), 20).into_vec(),
        // Every torque the batch touches, plus a few it does not.
        GradModel::Oracle => {
            let mut c: Vec<usize> = batch.iter().flat_map(|s| s.start..s.start + 3).collect();
            c.extend(rand::seq::index::sample(&mut rng, z.len(), 10).into_iter());
            c.sort_unstable();
            c.dedup();
            c
        }
    };
    let f = |x: &[f64]| objective.loss(x, &batch).unwrap();
    let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut out = GradCheck { coordinates: coords.len(), worst: 0.0, worst_at: 0 };
    for &i in &coords {
        let fd = settled_derivative(&f, &z, i, 1e-2 * z[i].abs().max(1e-2));
        let e = relative(grad[i], fd, 1e-9 * scale.max(f64::MIN_POSITIVE));
        if e > out.worst {
            out.worst = e;
            out.worst_at = i;
        }
    }
    out
}
