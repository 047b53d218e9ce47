//! Randomized physics checks shared by the physics suite and the acceptance run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajid_core::dynamics::{gravity_torque, step, JointState, PlantParams, StepConfig};

pub const CASES: usize = 1000;

/// Outcome of one randomized property: how many cases failed and the worst one.
#[derive(Debug, Default)]
pub struct Check {
    pub cases: usize,
    pub failures: usize,
    pub worst: f64,
    pub example: String,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.cases > 0 && self.failures == 0
    }

    fn record(&mut self, ok: bool, amount: f64, what: impl FnOnce() -> String) {
        self.cases += 1;
        if amount > self.worst || !amount.is_finite() {
            self.worst = amount;
        }
        if !ok {
            if self.failures == 0 {
                self.example = what();
            }
            self.failures += 1;
        }
    }
}

fn random_plant(rng: &mut ChaCha8Rng, damping: bool, friction: bool) -> PlantParams {
    let mut p = PlantParams::default();
    p.armature = rng.gen_range(0.0..0.01);
    if damping {
        p.damping = rng.gen_range(1e-3..1.0);
    }
    if friction {
        p.frictionloss = rng.gen_range(0.01..0.5);
    }
    p
}

/// With no applied torque and passive joint terms, kinetic plus potential
/// energy never grows over a step, for states with |q̇| ≤ 20 rad/s.
pub fn energy_non_increase(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = StepConfig::default();
    let mut c = Check::default();
    for k in 0..CASES {
        let (damping, friction) = match k % 3 {
            0 => (true, false),
            1 => (false, true),
            _ => (true, true),
        };
        let p = random_plant(&mut rng, damping, friction);
        let s = JointState::new(rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI), rng.gen_range(-20.0..20.0));
        let next = step(s, 0.0, &p, &cfg);
        let gain = p.energy(next) - p.energy(s);
        c.record(gain <= 1e-12, gain, || format!("{s:?} with {p:?} gains {gain:e} J"));
    }
    c
}

/// Gravity is odd in q, and the whole step, friction included, is odd in
/// (q, q̇, τ).
pub fn odd_symmetry(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = StepConfig::default();
    let mut c = Check::default();
    for _ in 0..CASES {
        let damped = rng.gen_bool(0.5);
        let p = random_plant(&mut rng, damped, true);
        let q: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let v: f64 = rng.gen_range(-20.0..20.0) * 10f64.powf(rng.gen_range(-5.0..0.0));
        let tau: f64 = rng.gen_range(-0.6..0.6);

        let g = gravity_torque(q, &p) + gravity_torque(-q, &p);
        let a = step(JointState::new(q, v), tau, &p, &cfg);
        let b = step(JointState::new(-q, -v), -tau, &p, &cfg);
        let err = g.abs().max((a.q + b.q).abs()).max((a.qdot + b.qdot).abs());

        // Friction alone, from rest at the bottom: it must oppose the motion.
        let at_bottom = step(JointState::new(0.0, v), 0.0, &p, &cfg);
        let opposes = at_bottom.qdot.abs() < v.abs() && at_bottom.qdot * v >= 0.0;

        c.record(err <= 1e-15 && opposes, err, || format!("q={q} v={v} tau={tau} with {p:?}: asymmetry {err:e}, opposes={opposes}"));
    }
    c
}

/// States at the times of the coarsest grid: every `k`-th state of a run
/// with step `dt / k`.
fn sampled(s: JointState, tau: f64, p: &PlantParams, dt: f64, k: usize, samples: usize) -> Vec<JointState> {
    let cfg = StepConfig { dt: dt / k as f64 };
    let mut out = Vec::with_capacity(samples);
    let mut s = s;
    for _ in 0..samples {
        for _ in 0..k {
            s = step(s, tau, p, &cfg);
        }
        out.push(s);
    }
    out
}

/// On friction-free dynamics the integrator is first order: the gap between
/// runs at δ and δ/2 shrinks by about two when both steps are halved again.
/// The gap is the RMS over a 0.1 s interval of the angle error and the
/// velocity error times 0.1 s, with δ = 1 ms.
pub fn step_order(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = StepConfig::default().dt;
    let samples = 50;
    let mut c = Check::default();
    for _ in 0..CASES {
        let damped = rng.gen_bool(0.5);
        let p = random_plant(&mut rng, damped, false);
        let s = JointState::new(rng.gen_range(-2.0..2.0), rng.gen_range(-5.0..5.0));
        let tau = rng.gen_range(-0.3..0.3);
        let runs: Vec<Vec<JointState>> = [2, 4, 8].iter().map(|&k| sampled(s, tau, &p, dt, k, samples)).collect();
        let gap = |a: &[JointState], b: &[JointState]| {
            let sum: f64 = a.iter().zip(b).map(|(a, b)| (a.q - b.q).powi(2) + (0.1 * (a.qdot - b.qdot)).powi(2)).sum();
            (sum / a.len() as f64).sqrt()
        };
        let ratio = gap(&runs[0], &runs[1]) / gap(&runs[1], &runs[2]);
        let ok = (1.8..=2.2).contains(&ratio);
        c.record(ok, (ratio - 2.0).abs(), || format!("{s:?} tau={tau} with {p:?}: ratio {ratio}"));
    }
    c
}
