//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! `cargo test --release --test acceptance -- 2 9` runs only criteria 2 and 9.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use common::fd::{check_gradient, GradModel};
use common::physics;
use trajid_core::config::ExperimentConfig;
use trajid_core::evaluation::{
    eval_mae, fit_family, run_horizon_ablation, run_stability_study, run_w_sweep, AblationRow, Dataset, FitRequest, FittedModel,
    ModelFamily,
};
use trajid_core::{ActuatorModel, ServoParams};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn mae(fit: &FittedModel, cfg: &ExperimentConfig, data: &Dataset) -> f64 {
    eval_mae(&fit.file, &data.test, &cfg.plant, &cfg.simulation, &cfg.evaluation).unwrap().mae
}

fn fit(family: ModelFamily, cfg: &ExperimentConfig, data: &Dataset) -> FittedModel {
    fit_family(family, &FitRequest::new(cfg), data).unwrap_or_else(|e| panic!("{family}: {e}"))
}

/// (max − min) / min of the MAE column of one family.
fn spread(rows: &[AblationRow], family: ModelFamily) -> (f64, Vec<(f64, f64)>) {
    let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.model == family).map(|r| (r.value, r.mae)).collect();
    let lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let hi = pts.iter().map(|p| p.1).fold(0.0, f64::max);
    ((hi - lo) / lo, pts)
}

fn mae_of(rows: &[AblationRow], family: ModelFamily, value: f64) -> f64 {
    rows.iter().find(|r| r.model == family && r.value == value).map(|r| r.mae).unwrap()
}

fn mrad(pts: &[(f64, f64)]) -> String {
    pts.iter().map(|(v, m)| format!("{v}: {:.4}", m * 1e3)).collect::<Vec<_>>().join(", ")
}

fn gradients() -> Outcome {
    let mut worst = BTreeMap::new();
    for model in [GradModel::Param, GradModel::Nn, GradModel::Oracle] {
        let w = (0..10).map(|seed| check_gradient(model, seed).worst).fold(0.0, f64::max);
        worst.insert(format!("{model:?}"), w);
    }
    let pass = worst.values().all(|&w| w < 1e-5);
    outcome(pass, format!("worst relative error over 10 seeds {worst:?} (< 1e-5)"))
}

fn exact_recovery() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.hidden.servo = ServoParams { torque_limit: f64::INFINITY, backemf: 0.0, ..ServoParams::default() };
    cfg.hidden.q_noise_std = 0.0;
    cfg.hidden.qdot_noise_std = 0.0;
    let data = Dataset::generate(&cfg).unwrap();
    let f = fit(ModelFamily::TrajidParam, &cfg, &data);
    let ActuatorModel::Pd(p) = f.file.model else { unreachable!() };
    let s = cfg.hidden.servo;
    let errs = [(p.kp - s.kp) / s.kp, (p.kv - s.kv) / s.kv, (p.armature - s.armature) / s.armature];
    let worst = errs.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    outcome(
        worst < 1e-3,
        format!("kp {:.6} kv {:.6} armature {:.7}; worst relative error {worst:.2e} (< 1e-3)", p.kp, p.kv, p.armature),
    )
}

fn stability() -> Outcome {
    let cfg = ExperimentConfig::default();
    let data = Dataset::generate(&cfg).unwrap();
    let study = run_stability_study(ModelFamily::TrajidParam, &cfg, &data, 25, cfg.optimizer.max_epochs, 1).unwrap();
    let rel = study.param_rel_std();
    let disp = study.loss_rel_dispersion();
    let pass = rel.iter().all(|&r| r < 0.01) && disp < 1e-3;
    let named: Vec<String> = study.param_names.iter().zip(&study.param_mean).zip(&rel).map(|((n, m), r)| format!("{n} {m:.5} ± {:.3}%", r * 100.0)).collect();
    outcome(pass, format!("25 runs: {}; loss dispersion {disp:.2e} (< 1%, < 1e-3)", named.join(", ")))
}

struct Zoo {
    maes: Vec<BTreeMap<ModelFamily, f64>>,
    nn_epochs: usize,
}

fn zoo() -> Zoo {
    let mut maes = Vec::new();
    let mut nn_epochs = 0;
    for seed in 0..3 {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        let data = Dataset::generate(&cfg).unwrap();
        let mut row = BTreeMap::new();
        for family in [ModelFamily::TrajidParam, ModelFamily::BenchSup, ModelFamily::TorqueOracle, ModelFamily::TrajidNn] {
            let f = fit(family, &cfg, &data);
            if seed == 0 && family == ModelFamily::TrajidNn {
                nn_epochs = f.report.epochs.len();
            }
            row.insert(family, mae(&f, &cfg, &data));
        }
        maes.push(row);
    }
    Zoo { maes, nn_epochs }
}

/// `better` beats `worse` by at least 10% of the larger value.
fn beats(better: f64, worse: f64) -> bool {
    worse - better >= 0.1 * worse.max(better)
}

fn ordering(z: &Zoo) -> Outcome {
    use ModelFamily::*;
    let mut pass = true;
    let mut lines = Vec::new();
    for (seed, m) in z.maes.iter().enumerate() {
        let a = beats(m[&TorqueOracle], m[&TrajidNn]);
        let b = beats(m[&TrajidParam], m[&BenchSup]);
        pass &= a && b;
        lines.push(format!(
            "seed {seed}: oracle {:.4} vs nn {:.4} [{}], param {:.4} vs bench-sup {:.4} [{}]",
            m[&TorqueOracle] * 1e3,
            m[&TrajidNn] * 1e3,
            if a { "ok" } else { "no" },
            m[&TrajidParam] * 1e3,
            m[&BenchSup] * 1e3,
            if b { "ok" } else { "no" }
        ));
    }
    outcome(pass, format!("MAE mrad, 10% margin; {}", lines.join("; ")))
}

fn es_parity(z: &Zoo) -> Outcome {
    let cfg = ExperimentConfig::default();
    let data = Dataset::generate(&cfg).unwrap();
    let param = z.maes[0][&ModelFamily::TrajidParam];
    let nn = z.maes[0][&ModelFamily::TrajidNn];
    let param_es = mae(&fit(ModelFamily::ParamEs, &cfg, &data), &cfg, &data);
    let mut req = FitRequest::new(&cfg);
    req.es_budget = Some(cfg.optimizer.max_epochs);
    let nn_es = mae(&fit_family(ModelFamily::NnEs, &req, &data).unwrap(), &cfg, &data);
    let gap = (param_es - param).abs() / param;
    let pass = gap <= 0.05 && nn_es >= 1.25 * nn;
    outcome(
        pass,
        format!(
            "param-es {:.4} vs trajid-param {:.4} mrad (gap {:.2}% ≤ 5%); nn-es {:.4} vs trajid-nn {:.4} mrad with {} evaluations each at most (ratio {:.2} ≥ 1.25; the gradient fit stopped after {} epochs)",
            param_es * 1e3,
            param * 1e3,
            gap * 100.0,
            nn_es * 1e3,
            nn * 1e3,
            cfg.optimizer.max_epochs,
            nn_es / nn,
            z.nn_epochs
        ),
    )
}

fn w_sweep() -> Outcome {
    let cfg = ExperimentConfig::default();
    let data = Dataset::generate(&cfg).unwrap();
    let families = [ModelFamily::TrajidParam, ModelFamily::TorqueOracle];
    let rows = run_w_sweep(&families, &cfg, &data, &[0.0, 0.25, 0.5, 0.75, 1.0], 1).unwrap();
    let (param_spread, param_pts) = spread(&rows, ModelFamily::TrajidParam);
    let (_, oracle_pts) = spread(&rows, ModelFamily::TorqueOracle);
    let a1 = mae_of(&rows, ModelFamily::TorqueOracle, 1.0);
    let a05 = mae_of(&rows, ModelFamily::TorqueOracle, 0.5);
    let pass = param_spread < 0.05 && a1 < a05;
    outcome(
        pass,
        format!(
            "trajid-param spread {:.2}% (< 5%) [{}]; torque-oracle α=1 {:.4} vs α=0.5 {:.4} mrad [{}]",
            param_spread * 100.0,
            mrad(&param_pts),
            a1 * 1e3,
            a05 * 1e3,
            mrad(&oracle_pts)
        ),
    )
}

fn horizons() -> Outcome {
    let cfg = ExperimentConfig::default();
    let data = Dataset::generate(&cfg).unwrap();
    let families = [ModelFamily::TrajidParam, ModelFamily::TorqueOracle];
    let rows = run_horizon_ablation(&families, &cfg, &data, &[1, 2, 3, 4], 1).unwrap();
    let (param_spread, param_pts) = spread(&rows, ModelFamily::TrajidParam);
    let (_, oracle_pts) = spread(&rows, ModelFamily::TorqueOracle);
    let h1 = mae_of(&rows, ModelFamily::TorqueOracle, 1.0);
    let h3 = mae_of(&rows, ModelFamily::TorqueOracle, 3.0);
    let pass = param_spread < 0.15 && h1 >= 2.0 * h3;
    outcome(
        pass,
        format!(
            "trajid-param spread {:.2}% (< 15%) [{}]; torque-oracle h1/h3 = {:.2} (≥ 2) [{}]",
            param_spread * 100.0,
            mrad(&param_pts),
            h1 / h3,
            mrad(&oracle_pts)
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (compared, problems) = common::cli::determinism_failures(dir.path());
    outcome(problems.is_empty() && compared > 0, format!("{compared} output files compared across reruns; problems: {problems:?}"))
}

fn physics_suite() -> Outcome {
    let checks = [
        ("energy", physics::energy_non_increase(11)),
        ("odd symmetry", physics::odd_symmetry(12)),
        ("step order", physics::step_order(13)),
    ];
    let pass = checks.iter().all(|(_, c)| c.passed());
    let detail: Vec<String> = checks.iter().map(|(n, c)| format!("{n} {}/{} failed", c.failures, c.cases)).collect();
    outcome(pass, detail.join(", "))
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |k: usize| selected.is_empty() || selected.contains(&k);
    let mut failed = Vec::new();
    let mut report = |k: usize, name: &str, run: &mut dyn FnMut() -> Outcome| {
        if !wanted(k) {
            return;
        }
        let started = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {k} {name}: {verdict} ({:.0} s) {}", started.elapsed().as_secs_f64(), o.detail);
        if !o.pass {
            failed.push(k);
        }
    };
    report(1, "gradient correctness", &mut gradients);
    report(2, "noiseless exact recovery", &mut exact_recovery);
    report(3, "stability under noise", &mut stability);
    let zoo = if wanted(4) || wanted(5) { Some(zoo()) } else { None };
    report(4, "model-zoo ordering", &mut || ordering(zoo.as_ref().unwrap()));
    report(5, "gradient-free parity", &mut || es_parity(zoo.as_ref().unwrap()));
    report(6, "loss-weight sweep", &mut w_sweep);
    report(7, "horizon ablation", &mut horizons);
    report(8, "CLI determinism", &mut determinism);
    report(9, "physics suite", &mut physics_suite);
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
