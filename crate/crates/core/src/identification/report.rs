//! Optimization traces and their on-disk forms.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Why a fit stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum Termination {
    /// No full-set improvement for `patience` epochs.
    Patience { epoch: usize },
    MaxEpochs,
    /// The loss-evaluation budget ran out.
    Budget { evaluations: usize },
    NonFinite { epoch: usize, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Minibatch loss at the parameters the update started from.
    pub batch_loss: f64,
    /// Full training-set loss after the update, when evaluated this epoch.
    pub full_loss: Option<f64>,
    /// L2 norm of the minibatch gradient; absent for gradient-free fits.
    pub grad_norm: Option<f64>,
    /// Parameters after the update, kept only for small models.
    pub params: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub method: String,
    pub param_names: Vec<String>,
    pub initial_params: Vec<f64>,
    pub initial_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Lowest full training-set loss seen, including the initial parameters.
    pub best_loss: f64,
    /// Epoch at which the best parameters were reached (0 = initial).
    pub best_epoch: usize,
    pub best_params: Vec<f64>,
    /// Minibatch loss evaluations spent by the optimizer.
    pub evaluations: usize,
    pub termination: Termination,
    /// Machine dependent; kept out of the deterministic output files.
    pub wall_clock_s: f64,
}

impl FitReport {
    /// Best full-set loss after each recorded evaluation, including the initial one.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = self.initial_loss;
        self.epochs
            .iter()
            .map(|e| {
                if let Some(f) = e.full_loss {
                    best = best.min(f);
                }
                best
            })
            .collect()
    }

    /// Line-oriented trace: `epoch,batch_loss,full_loss,grad_norm,param_0..`.
    /// Missing values are empty fields.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let width = self.epochs.iter().filter_map(|e| e.params.as_ref().map(Vec::len)).max().unwrap_or(0);
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["epoch".to_string(), "batch_loss".into(), "full_loss".into(), "grad_norm".into()];
        header.extend((0..width).map(|k| format!("param_{k}")));
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            let mut row = vec![e.epoch.to_string(), e.batch_loss.to_string(), opt(e.full_loss), opt(e.grad_norm)];
            match &e.params {
                Some(p) => row.extend(p.iter().map(f64::to_string)),
                None => row.extend(std::iter::repeat(String::new()).take(width)),
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Key-value summary without the wall-clock time.
    pub fn summary(&self) -> FitSummary {
        let named = if self.param_names.len() <= 64 {
            Some(self.param_names.iter().cloned().zip(self.best_params.iter().copied()).collect())
        } else {
            None
        };
        FitSummary {
            method: self.method.clone(),
            param_count: self.best_params.len(),
            best_params: named,
            best_loss: self.best_loss,
            best_epoch: self.best_epoch,
            initial_loss: self.initial_loss,
            epochs_run: self.epochs.len(),
            evaluations: self.evaluations,
            termination: self.termination.clone(),
        }
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let f = std::fs::File::create(dir.join(format!("{stem}.csv")))?;
        self.write_csv(std::io::BufWriter::new(f))?;
        let summary = serde_json::to_string_pretty(&self.summary())?;
        std::fs::write(dir.join(format!("{stem}_summary.json")), summary + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub method: String,
    pub param_count: usize,
    pub best_params: Option<BTreeMap<String, f64>>,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub initial_loss: f64,
    pub epochs_run: usize,
    pub evaluations: usize,
    pub termination: Termination,
}
