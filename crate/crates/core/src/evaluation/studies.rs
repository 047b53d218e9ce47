use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::zoo::{fit_family, Dataset, FitRequest, FittedModel, ModelFamily};
use super::{eval_mae, EvalResult};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::identification::LossWeights;
use crate::seeds::derive_seed;

/// One refit of one model family at one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: ModelFamily,
    /// `alpha` or `horizon`.
    pub setting: String,
    pub value: f64,
    pub mae: f64,
    pub best_loss: f64,
    pub epochs_run: usize,
    /// Fitted parameters of small models.
    pub params: Option<Vec<f64>>,
}

impl AblationRow {
    pub fn write_csv<W: Write>(rows: &[AblationRow], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let setting = rows.first().map(|r| r.setting.as_str()).unwrap_or("value");
        w.write_record(["model", setting, "mae", "best_loss", "epochs_run"])?;
        for r in rows {
            w.write_record([r.model.name().to_string(), r.value.to_string(), r.mae.to_string(), r.best_loss.to_string(), r.epochs_run.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn run_jobs<J: Sync, R: Send>(jobs: &[J], workers: usize, f: impl Fn(&J) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    if workers <= 1 {
        return jobs.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| jobs.par_iter().map(f).collect())
}

fn evaluate(fit: &FittedModel, cfg: &ExperimentConfig, data: &Dataset) -> Result<EvalResult> {
    eval_mae(&fit.file, &data.test, &cfg.plant, &cfg.simulation, &cfg.evaluation)
}

fn ablation_row(family: ModelFamily, setting: &str, value: f64, fit: &FittedModel, r: &EvalResult) -> AblationRow {
    AblationRow {
        model: family,
        setting: setting.into(),
        value,
        mae: r.mae,
        best_loss: fit.report.best_loss,
        epochs_run: fit.report.epochs.len(),
        params: (fit.report.best_params.len() <= 64).then(|| fit.report.best_params.clone()),
    }
}

/// Refits each family with `W = diag(α, 1 − α)` for every α.
pub fn run_w_sweep(families: &[ModelFamily], cfg: &ExperimentConfig, data: &Dataset, alphas: &[f64], workers: usize) -> Result<Vec<AblationRow>> {
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Usage(format!("alpha {a} is outside [0, 1]")));
    }
    let jobs: Vec<(ModelFamily, f64)> = families.iter().flat_map(|&f| alphas.iter().map(move |&a| (f, a))).collect();
    run_jobs(&jobs, workers, |&(family, alpha)| {
        let mut c = cfg.clone();
        c.weights = LossWeights::from_alpha(alpha);
        let job = || -> Result<AblationRow> {
            c.weights.validate()?;
            let fit = fit_family(family, &FitRequest::new(&c), data)?;
            let r = evaluate(&fit, &c, data)?;
            Ok(ablation_row(family, "alpha", alpha, &fit, &r))
        };
        job().map_err(|e| e.context(format!("{family} at alpha = {alpha}")))
    })
}

/// Refits each family at every segment horizon N.
pub fn run_horizon_ablation(
    families: &[ModelFamily],
    cfg: &ExperimentConfig,
    data: &Dataset,
    horizons: &[usize],
    workers: usize,
) -> Result<Vec<AblationRow>> {
    if horizons.contains(&0) {
        return Err(Error::Usage("horizons must be ≥ 1".into()));
    }
    let jobs: Vec<(ModelFamily, usize)> = families.iter().flat_map(|&f| horizons.iter().map(move |&h| (f, h))).collect();
    run_jobs(&jobs, workers, |&(family, horizon)| {
        let mut c = cfg.clone();
        c.segmentation.horizon = horizon;
        let job = || -> Result<AblationRow> {
            let fit = fit_family(family, &FitRequest::new(&c), data)?;
            let r = evaluate(&fit, &c, data)?;
            Ok(ablation_row(family, "horizon", horizon as f64, &fit, &r))
        };
        job().map_err(|e| e.context(format!("{family} at horizon {horizon}")))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRun {
    pub run: usize,
    pub seed: u64,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub params: Vec<f64>,
    pub mae: f64,
    /// Best full-set loss after each epoch.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

/// Quantiles of the best-so-far loss across runs, per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceQuantiles {
    pub epoch: usize,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityStudy {
    pub model: ModelFamily,
    pub param_names: Vec<String>,
    pub runs: Vec<StabilityRun>,
    pub param_mean: Vec<f64>,
    /// Sample standard deviation across runs.
    pub param_std: Vec<f64>,
    pub loss_mean: f64,
    pub loss_std: f64,
    #[serde(skip)]
    pub trace: Vec<TraceQuantiles>,
}

impl StabilityStudy {
    pub fn param_rel_std(&self) -> Vec<f64> {
        self.param_std.iter().zip(&self.param_mean).map(|(s, m)| s / m.abs()).collect()
    }

    pub fn loss_rel_dispersion(&self) -> f64 {
        self.loss_std / self.loss_mean.abs()
    }

    /// `run,seed,best_loss,best_epoch,epochs_run,mae,<param names>`
    pub fn write_runs_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["run", "seed", "best_loss", "best_epoch", "epochs_run", "mae"].map(String::from).to_vec();
        if self.param_names.len() <= 64 {
            header.extend(self.param_names.iter().cloned());
        }
        w.write_record(&header)?;
        for r in &self.runs {
            let mut row = vec![
                r.run.to_string(),
                r.seed.to_string(),
                r.best_loss.to_string(),
                r.best_epoch.to_string(),
                r.epochs_run.to_string(),
                r.mae.to_string(),
            ];
            if self.param_names.len() <= 64 {
                row.extend(r.params.iter().map(f64::to_string));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "min", "q25", "median", "q75", "max"])?;
        for t in &self.trace {
            w.write_record([t.epoch.to_string(), t.min.to_string(), t.q25.to_string(), t.median.to_string(), t.q75.to_string(), t.max.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub(crate) fn trace_quantiles(traces: &[Vec<f64>]) -> Vec<TraceQuantiles> {
    let len = traces.iter().map(Vec::len).max().unwrap_or(0);
    (0..len)
        .map(|e| {
            // A run that stopped early keeps its final value.
            let mut v: Vec<f64> = traces.iter().filter(|t| !t.is_empty()).map(|t| t[e.min(t.len() - 1)]).collect();
            v.sort_by(f64::total_cmp);
            TraceQuantiles {
                epoch: e + 1,
                min: v[0],
                q25: quantile(&v, 0.25),
                median: quantile(&v, 0.5),
                q75: quantile(&v, 0.75),
                max: v[v.len() - 1],
            }
        })
        .collect()
}

/// Independent fits that differ only in seed: minibatch sampling, network
/// initialization and a scattered PD starting point.
pub fn run_stability_study(
    family: ModelFamily,
    cfg: &ExperimentConfig,
    data: &Dataset,
    n_runs: usize,
    epochs: usize,
    workers: usize,
) -> Result<StabilityStudy> {
    if n_runs < 2 {
        return Err(Error::Usage("a stability study needs at least two runs".into()));
    }
    let mut c = cfg.clone();
    c.optimizer.max_epochs = epochs;
    let jobs: Vec<usize> = (0..n_runs).collect();
    let fits = run_jobs(&jobs, workers, |&run| {
        let seed = derive_seed(cfg.seed, &format!("stability-run-{run}"));
        let mut req = FitRequest::new(&c);
        req.seed = seed;
        req.scatter_init = true;
        let fit = fit_family(family, &req, data).map_err(|e| e.context(format!("stability run {run}")))?;
        let r = evaluate(&fit, &c, data)?;
        let run_row = StabilityRun {
            run,
            seed,
            best_loss: fit.report.best_loss,
            best_epoch: fit.report.best_epoch,
            epochs_run: fit.report.epochs.len(),
            params: fit.report.best_params.clone(),
            mae: r.mae,
            trace: fit.report.best_so_far(),
        };
        Ok((run_row, fit.report.param_names))
    })?;
    let names = fits[0].1.clone();
    let fits: Vec<StabilityRun> = fits.into_iter().map(|(r, _)| r).collect();
    let width = fits[0].params.len();
    let (mut param_mean, mut param_std) = (Vec::with_capacity(width), Vec::with_capacity(width));
    for k in 0..width {
        let col: Vec<f64> = fits.iter().map(|f| f.params[k]).collect();
        let (m, s) = mean_std(&col);
        param_mean.push(m);
        param_std.push(s);
    }
    let losses: Vec<f64> = fits.iter().map(|f| f.best_loss).collect();
    let (loss_mean, loss_std) = mean_std(&losses);
    let traces: Vec<Vec<f64>> = fits.iter().map(|f| f.trace.clone()).collect();
    Ok(StabilityStudy {
        model: family,
        param_names: names,
        runs: fits,
        param_mean,
        param_std,
        loss_mean,
        loss_std,
        trace: trace_quantiles(&traces),
    })
}
