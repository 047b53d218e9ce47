//! The `trajid` command line.

use std::ffi::OsString;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::actuators::ModelFile;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result, ResultExt};
use crate::evaluation::{
    eval_hidden, eval_mae, fit_family, run_horizon_ablation, run_stability_study, run_w_sweep, AblationRow, ComparisonReport,
    ComparisonRow, Dataset, FitRequest, ModelFamily,
};

#[derive(Debug, Parser)]
#[command(name = "trajid", version, about = "Trajectory-based actuator identification for a single joint")]
pub struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Global seed, overriding the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; 1 gives bit-exact reruns of studies and parallel fits.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize training and held-out logs and a stand sweep.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Fit one model family.
    Identify {
        #[command(flatten)]
        common: Common,
        /// Directory holding train.csv and test.csv; defaults to the output directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model family; defaults to the configured one.
        #[arg(long)]
        model: Option<String>,
        /// Segment horizon N.
        #[arg(long)]
        horizon: Option<usize>,
        /// Continue from a saved model.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Score models on the held-out log.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Saved model files to score.
        #[arg(long = "model-file", num_args = 1..)]
        model_files: Vec<PathBuf>,
        /// Fit and score these families as well (comma separated, or `all`).
        #[arg(long)]
        fit: Option<String>,
        /// Include the hidden reference actuator as a row.
        #[arg(long)]
        hidden: bool,
    },
    /// Run a study: loss-weight sweep, horizon ablation or multi-seed stability.
    Ablate {
        #[arg(value_enum)]
        kind: AblationKind,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model families (comma separated).
        #[arg(long)]
        models: Option<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.25, 0.5, 0.75, 1.0])]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 4])]
        horizons: Vec<usize>,
        #[arg(long, default_value_t = 25)]
        runs: usize,
        /// Epoch cap per stability run; the configured one when omitted.
        #[arg(long)]
        epochs: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationKind {
    WSweep,
    Horizon,
    Stability,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::FitAborted { report, .. } = e.root() {
                eprintln!(
                    "  fit trace: {} epochs, best loss {} at epoch {}",
                    report.epochs.len(),
                    report.best_loss,
                    report.best_epoch
                );
            }
            e.exit_code()
        }
    }
}

struct Context {
    cfg: ExperimentConfig,
    out: PathBuf,
    workers: usize,
}

fn context(common: &Common) -> Result<Context> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    let workers = match common.workers {
        Some(0) => return Err(Error::Usage("--workers must be ≥ 1".into())),
        Some(w) => w,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating output directory {}", out.display()))?;
    Ok(Context { cfg, out, workers })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn create(path: &Path) -> Result<BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// The resolved configuration, written next to every command's outputs.
fn snapshot(ctx: &Context) -> Result<()> {
    write_text(&ctx.out.join("config.toml"), &ctx.cfg.to_toml()?)
}

fn load_data(dir: Option<&PathBuf>, ctx: &Context) -> Result<Dataset> {
    let dir = dir.unwrap_or(&ctx.out);
    if !dir.join("train.csv").exists() || !dir.join("test.csv").exists() {
        return Err(Error::Usage(format!("{} has no train.csv/test.csv; run `trajid generate` first", dir.display())));
    }
    Dataset::load(dir)
}

fn parse_families(list: &str) -> Result<Vec<ModelFamily>> {
    if list == "all" {
        return Ok(ModelFamily::ALL.to_vec());
    }
    list.split(',').map(|s| s.trim().parse()).collect()
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { common } => generate(&common),
        Command::Identify { common, data, model, horizon, init_from } => identify(&common, data, model, horizon, init_from),
        Command::Evaluate { common, data, model_files, fit, hidden } => evaluate(&common, data, model_files, fit, hidden),
        Command::Ablate { kind, common, data, models, alphas, horizons, runs, epochs } => {
            ablate(kind, &common, data, models, &alphas, &horizons, runs, epochs)
        }
    }
}

fn generate(common: &Common) -> Result<()> {
    let ctx = context(common)?;
    let data = Dataset::generate(&ctx.cfg)?;
    data.save(&ctx.out)?;
    let hidden = match &ctx.cfg.hidden.model {
        Some(p) => json!({ "kind": "model-file", "path": p }),
        None => json!({ "kind": "servo", "servo": ctx.cfg.hidden.servo }),
    };
    let manifest = json!({
        "format": "trajid-dataset",
        "version": 1,
        "seed": ctx.cfg.seed,
        "hidden": hidden,
        "q_noise_std": ctx.cfg.hidden.q_noise_std,
        "qdot_noise_std": ctx.cfg.hidden.qdot_noise_std,
        "train": { "file": "train.csv", "samples": data.train.len(), "excitation_seed": ctx.cfg.train_excitation().seed },
        "test": { "file": "test.csv", "samples": data.test.len(), "excitation_seed": ctx.cfg.test_excitation().seed },
        "stand": data.stand.as_ref().map(|s| json!({ "file": "stand.csv", "samples": s.len(), "seed": ctx.cfg.stand_spec().seed })),
    });
    write_json(&ctx.out.join("manifest.json"), &manifest)?;
    snapshot(&ctx)?;
    println!("wrote {} training and {} held-out samples to {}", data.train.len(), data.test.len(), ctx.out.display());
    Ok(())
}

fn identify(common: &Common, data: Option<PathBuf>, model: Option<String>, horizon: Option<usize>, init_from: Option<PathBuf>) -> Result<()> {
    let mut ctx = context(common)?;
    if let Some(h) = horizon {
        ctx.cfg.segmentation.horizon = h;
    }
    if let Some(m) = &model {
        ctx.cfg.model.kind = m.parse()?;
    }
    ctx.cfg.validate()?;
    let family = ctx.cfg.model.kind;
    let dataset = load_data(data.as_ref(), &ctx)?;
    let mut req = FitRequest::new(&ctx.cfg);
    req.workers = ctx.workers;
    req.init_from = init_from.as_deref().map(ModelFile::load).transpose()?;
    let fit = fit_family(family, &req, &dataset)?;
    let stem = family.name();
    fit.file.save(&ctx.out.join(format!("{stem}.model.json")))?;
    fit.report.save(&ctx.out, &format!("{stem}_fit"))?;
    write_json(&ctx.out.join("timing.json"), &json!({ stem: { "fit_seconds": fit.fit_seconds } }))?;
    snapshot(&ctx)?;
    let s = fit.report.summary();
    println!(
        "{stem}: {} parameters, best loss {:.6e} at epoch {} ({:?})",
        s.param_count, s.best_loss, s.best_epoch, s.termination
    );
    if let Some(named) = &s.best_params {
        for (k, v) in named {
            println!("  {k} = {v}");
        }
    }
    Ok(())
}

fn evaluate(common: &Common, data: Option<PathBuf>, model_files: Vec<PathBuf>, fit: Option<String>, hidden: bool) -> Result<()> {
    let ctx = context(common)?;
    let dataset = load_data(data.as_ref(), &ctx)?;
    let cfg = &ctx.cfg;
    let score = |file: &ModelFile| eval_mae(file, &dataset.test, &cfg.plant, &cfg.simulation, &cfg.evaluation);
    let mut rows = Vec::new();
    let mut timing = serde_json::Map::new();
    for path in &model_files {
        let file = ModelFile::load(path)?;
        if let crate::actuators::ActuatorModel::TorqueSequence(s) = &file.model {
            if s.tau.len() < dataset.test.len() - 1 {
                return Err(Error::Usage(format!(
                    "{} holds {} torques but the held-out log needs {}",
                    path.display(),
                    s.tau.len(),
                    dataset.test.len() - 1
                )));
            }
        }
        let name = path.file_name().map(|n| n.to_string_lossy().trim_end_matches(".model.json").to_string()).unwrap_or_default();
        let result = score(&file).with_context(|| format!("evaluating {}", path.display()))?;
        rows.push(ComparisonRow { model: name, result, param_count: file.model.param_count() });
    }
    if let Some(list) = fit {
        for family in parse_families(&list)? {
            let mut req = FitRequest::new(cfg);
            req.workers = ctx.workers;
            if family == ModelFamily::NnEs {
                // Same number of minibatch loss evaluations as the gradient fit.
                req.es_budget = Some(cfg.optimizer.max_epochs);
            }
            let fitted = fit_family(family, &req, &dataset).with_context(|| format!("fitting {family}"))?;
            fitted.file.save(&ctx.out.join(format!("{}.model.json", family.name())))?;
            timing.insert(family.name().into(), json!({ "fit_seconds": fitted.fit_seconds }));
            let result = score(&fitted.file)?;
            rows.push(ComparisonRow { model: family.name().into(), result, param_count: fitted.file.model.param_count() });
        }
    }
    if hidden {
        let spec = cfg.hidden_spec()?;
        let result = eval_hidden(&spec, &dataset.test, &cfg.plant, &cfg.simulation, &cfg.evaluation)?;
        rows.push(ComparisonRow { model: "hidden".into(), result, param_count: 0 });
    }
    if rows.is_empty() {
        return Err(Error::Usage("nothing to evaluate: pass --model-file, --fit or --hidden".into()));
    }
    let report = ComparisonReport::new(rows);
    report.write_csv(create(&ctx.out.join("comparison.csv"))?)?;
    report.write_plot_data(create(&ctx.out.join("comparison_plot.csv"))?)?;
    if !timing.is_empty() {
        write_json(&ctx.out.join("timing.json"), &timing)?;
    }
    snapshot(&ctx)?;
    for (k, r) in report.rows.iter().enumerate() {
        println!(
            "{:>2}. {:<16} MAE {:.4} mrad (windows {:.4} ± {:.4})",
            k + 1,
            r.model,
            r.result.mae * 1e3,
            r.result.window_mean() * 1e3,
            r.result.window_std() * 1e3
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    kind: AblationKind,
    common: &Common,
    data: Option<PathBuf>,
    models: Option<String>,
    alphas: &[f64],
    horizons: &[usize],
    runs: usize,
    epochs: Option<usize>,
) -> Result<()> {
    let ctx = context(common)?;
    let dataset = load_data(data.as_ref(), &ctx)?;
    let cfg = &ctx.cfg;
    let default_models = match kind {
        AblationKind::Stability => "trajid-param",
        _ => "trajid-param,torque-oracle",
    };
    let families = parse_families(models.as_deref().unwrap_or(default_models))?;
    match kind {
        AblationKind::WSweep => {
            let rows = run_w_sweep(&families, cfg, &dataset, alphas, ctx.workers)?;
            AblationRow::write_csv(&rows, create(&ctx.out.join("w_sweep.csv"))?)?;
            print_rows(&rows);
        }
        AblationKind::Horizon => {
            let rows = run_horizon_ablation(&families, cfg, &dataset, horizons, ctx.workers)?;
            AblationRow::write_csv(&rows, create(&ctx.out.join("horizon.csv"))?)?;
            print_rows(&rows);
        }
        AblationKind::Stability => {
            let epochs = epochs.unwrap_or(cfg.optimizer.max_epochs);
            for family in families {
                let study = run_stability_study(family, cfg, &dataset, runs, epochs, ctx.workers)?;
                let stem = format!("stability_{}", family.name());
                study.write_runs_csv(create(&ctx.out.join(format!("{stem}.csv")))?)?;
                study.write_trace_csv(create(&ctx.out.join(format!("{stem}_trace.csv")))?)?;
                let summary = json!({
                    "model": family,
                    "runs": study.runs.len(),
                    "param_names": study.param_names,
                    "param_mean": study.param_mean,
                    "param_std": study.param_std,
                    "param_rel_std": study.param_rel_std(),
                    "loss_mean": study.loss_mean,
                    "loss_std": study.loss_std,
                    "loss_rel_dispersion": study.loss_rel_dispersion(),
                });
                write_json(&ctx.out.join(format!("{stem}_summary.json")), &summary)?;
                println!("{family}: {} runs", study.runs.len());
                for ((n, m), r) in study.param_names.iter().zip(&study.param_mean).zip(study.param_rel_std()).take(16) {
                    println!("  {n} = {m:.6} (relative std {:.3}%)", r * 100.0);
                }
                println!("  best loss {:.6e} (relative dispersion {:.2e})", study.loss_mean, study.loss_rel_dispersion());
            }
        }
    }
    snapshot(&ctx)?;
    Ok(())
}

fn print_rows(rows: &[AblationRow]) {
    for r in rows {
        println!("{:<14} {} = {:<5} MAE {:.4} mrad", r.model.name(), r.setting, r.value, r.mae * 1e3);
    }
}
