//! Generates the default synthetic dataset, fits the three PD parameters and
//! scores the result on the held-out log.
//!
//! cargo run --release --example identify_pd -- [seed]

use trajid_core::config::ExperimentConfig;
use trajid_core::evaluation::{eval_hidden, eval_mae, fit_family, Dataset, FitRequest, ModelFamily};

fn main() -> trajid_core::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let data = Dataset::generate(&cfg)?;

    let fit = fit_family(ModelFamily::TrajidParam, &FitRequest::new(&cfg), &data)?;
    let names = fit.file.model.param_names();
    for (name, value) in names.iter().zip(fit.file.model.params()) {
        println!("{name:>9} = {value:.5}");
    }
    let s = cfg.hidden.servo;
    println!("   hidden = kp {} kv {} armature {}", s.kp, s.kv, s.armature);

    let fitted = eval_mae(&fit.file, &data.test, &cfg.plant, &cfg.simulation, &cfg.evaluation)?;
    let hidden = eval_hidden(&cfg.hidden_spec()?, &data.test, &cfg.plant, &cfg.simulation, &cfg.evaluation)?;
    println!("held-out MAE {:.3} mrad (hidden model {:.4} mrad), {} epochs", fitted.mae * 1e3, hidden.mae * 1e3, fit.report.epochs.len());
    Ok(())
}
