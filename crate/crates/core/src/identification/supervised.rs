//! Supervised fit of the steady-state bench map (u, q̇) → τ.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::report::{EpochRecord, FitReport, Termination};
use crate::actuators::mlp::{Mlp, Normalizer};
use crate::error::{Error, Result};
use crate::excitation::StandData;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub seed: u64,
    /// Fit the input standardizer on the data; otherwise keep the map's own.
    pub standardize: bool,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig { learning_rate: 1e-3, epochs: 500, minibatch_size: 256, seed: 0, standardize: true }
    }
}

/// Adam on mean squared torque error over shuffled minibatches. Returns the
/// parameters with the lowest full-data MSE.
pub fn fit_bench_supervised(data: &StandData, map_init: &Mlp, cfg: &SupervisedConfig) -> Result<(Mlp, FitReport)> {
    if data.is_empty() {
        return Err(Error::Usage("stand dataset is empty".into()));
    }
    if map_init.input_width() != 2 || cfg.minibatch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Usage("bench map takes (u, q̇); minibatch_size ≥ 1 and learning_rate > 0 are required".into()));
    }
    let started = Instant::now();
    let rows: Vec<Vec<f64>> = data.u.iter().zip(&data.qdot).map(|(&u, &v)| vec![u, v]).collect();
    let mut net = map_init.clone();
    if cfg.standardize || net.normalizer.is_none() {
        net.normalizer = Some(if cfg.standardize { Normalizer::fit(&rows)? } else { Normalizer::identity(2) });
    }
    let all_inputs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let (initial_loss, _) = net.mse_and_gradient(&all_inputs, &data.tau)?;
    let mut report = FitReport {
        method: "adam-supervised".into(),
        param_names: (0..net.params.len()).map(|k| format!("w{k}")).collect(),
        initial_params: net.params.clone(),
        initial_loss,
        epochs: Vec::new(),
        best_loss: initial_loss,
        best_epoch: 0,
        best_params: net.params.clone(),
        evaluations: 0,
        termination: Termination::MaxEpochs,
        wall_clock_s: 0.0,
    };
    let mut adam = Adam::new(net.params.len(), cfg.learning_rate, 0.9, 0.999, 1e-8);
    let mask = vec![true; net.params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut batch_loss = 0.0;
        for chunk in order.chunks(cfg.minibatch_size) {
            let inputs: Vec<&[f64]> = chunk.iter().map(|&i| rows[i].as_slice()).collect();
            let targets: Vec<f64> = chunk.iter().map(|&i| data.tau[i]).collect();
            let (l, g) = net.mse_and_gradient(&inputs, &targets)?;
            batch_loss += l * chunk.len() as f64;
            adam.step(&mut net.params, &g, &mask);
            report.evaluations += 1;
        }
        batch_loss /= rows.len() as f64;
        let (full, _) = net.mse_and_gradient(&all_inputs, &data.tau)?;
        if !full.is_finite() {
            return Err(Error::FitAborted { epoch, reason: format!("supervised MSE is {full}"), report: Box::new(report) });
        }
        if full < report.best_loss {
            report.best_loss = full;
            report.best_epoch = epoch;
            report.best_params = net.params.clone();
        }
        report.epochs.push(EpochRecord { epoch, batch_loss, full_loss: Some(full), grad_norm: None, params: None });
    }
    net.params = report.best_params.clone();
    report.wall_clock_s = started.elapsed().as_secs_f64();
    Ok((net, report))
}
