use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actuators::mlp::{Mlp, Normalizer};
use crate::actuators::{ActuatorModel, ModelFile, BENCH_SIZES, NN_SIZES};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result, ResultExt};
use crate::excitation::{generate_dataset, generate_stand_data, HiddenActuator, StandData};
use crate::identification::{
    fit_bench_supervised, fit_es, fit_gradient, Batching, FitReport, JointTerms, Parameterization, SegmentationConfig,
};
use crate::seeds::derive_seed;
use crate::trajectory::Trajectory;

/// The compared actuator models and how each is fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    /// PD gains and armature by gradient descent.
    TrajidParam,
    /// [3, 32, 32, 1] torque network by gradient descent.
    TrajidNn,
    /// Free per-step torques fitted to the held-out log itself.
    TorqueOracle,
    /// PWM PD law composed with a torque map learned on stand sweeps.
    BenchSup,
    /// The TrajidParam problem solved by an evolution strategy.
    ParamEs,
    /// The TrajidNn problem solved by an evolution strategy.
    NnEs,
    /// Command-space correction feeding a fixed PD regulator.
    Residual,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 7] = [
        ModelFamily::TrajidParam,
        ModelFamily::TrajidNn,
        ModelFamily::TorqueOracle,
        ModelFamily::BenchSup,
        ModelFamily::ParamEs,
        ModelFamily::NnEs,
        ModelFamily::Residual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::TrajidParam => "trajid-param",
            ModelFamily::TrajidNn => "trajid-nn",
            ModelFamily::TorqueOracle => "torque-oracle",
            ModelFamily::BenchSup => "bench-sup",
            ModelFamily::ParamEs => "param-es",
            ModelFamily::NnEs => "nn-es",
            ModelFamily::Residual => "residual",
        }
    }

    /// Whether fitting uses the held-out log rather than the training log.
    pub fn fits_test_log(self) -> bool {
        self == ModelFamily::TorqueOracle
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelFamily::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = ModelFamily::ALL.iter().map(|m| m.name()).collect();
                Error::Usage(format!("unknown model {s:?}; expected one of {}", known.join(", ")))
            })
    }
}

/// Training log, held-out log and optional stand sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Trajectory,
    pub test: Trajectory,
    pub stand: Option<StandData>,
}

impl Dataset {
    /// Synthesizes every dataset file from the configuration.
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let hidden = cfg.hidden_spec()?;
        let train = generate_dataset(&cfg.train_excitation(), &hidden, &cfg.plant, &cfg.simulation).context("training log")?;
        let test = generate_dataset(&cfg.test_excitation(), &hidden, &cfg.plant, &cfg.simulation).context("held-out log")?;
        let stand = match &hidden.actuator {
            HiddenActuator::Servo(s) if s.backemf > 0.0 && s.torque_limit.is_finite() => {
                Some(generate_stand_data(s, &cfg.stand_spec()).context("stand sweep")?)
            }
            _ => None,
        };
        Ok(Dataset { train, test, stand })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.train.save(&dir.join("train.csv"))?;
        self.test.save(&dir.join("test.csv"))?;
        if let Some(s) = &self.stand {
            s.save(&dir.join("stand.csv"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let train = Trajectory::load(&dir.join("train.csv")).context("train.csv")?;
        let test = Trajectory::load(&dir.join("test.csv")).context("test.csv")?;
        let stand_path = dir.join("stand.csv");
        let stand = if stand_path.exists() { Some(StandData::load(&stand_path).context("stand.csv")?) } else { None };
        Ok(Dataset { train, test, stand })
    }
}

/// Per-fit overrides on top of the experiment configuration.
#[derive(Debug, Clone)]
pub struct FitRequest<'a> {
    pub cfg: &'a ExperimentConfig,
    /// Seed of this fit; component seeds derive from it.
    pub seed: u64,
    pub workers: usize,
    /// Perturb the PD starting point (multi-seed studies).
    pub scatter_init: bool,
    /// Continue from a saved model instead of the default start.
    pub init_from: Option<ModelFile>,
    /// Loss-evaluation budget for the evolution-strategy fits.
    pub es_budget: Option<usize>,
}

impl<'a> FitRequest<'a> {
    pub fn new(cfg: &'a ExperimentConfig) -> Self {
        FitRequest { cfg, seed: cfg.seed, workers: 1, scatter_init: false, init_from: None, es_budget: None }
    }
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    pub family: ModelFamily,
    pub file: ModelFile,
    pub report: FitReport,
    pub fit_seconds: f64,
}

fn starting_model(family: ModelFamily, req: &FitRequest<'_>, data: &Dataset) -> Result<ActuatorModel> {
    if let Some(f) = &req.init_from {
        return Ok(f.model.clone());
    }
    let cfg = req.cfg;
    Ok(match family {
        ModelFamily::TrajidParam | ModelFamily::ParamEs => {
            let mut p = cfg.model.pd_init;
            if req.scatter_init && cfg.model.init_scatter > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(req.seed, "init-scatter"));
                let s = cfg.model.init_scatter;
                for v in [&mut p.kp, &mut p.kv, &mut p.armature] {
                    *v *= rng.gen_range(-s..=s).exp();
                }
            }
            ActuatorModel::Pd(p)
        }
        ModelFamily::TrajidNn | ModelFamily::NnEs | ModelFamily::Residual => {
            let rows: Vec<Vec<f64>> = (0..data.train.len()).map(|i| vec![data.train.q_des[i], data.train.q[i], data.train.qdot[i]]).collect();
            let norm = Normalizer::fit(&rows)?;
            let seed = derive_seed(req.seed, "nn-init");
            match family {
                ModelFamily::Residual => match ActuatorModel::residual(seed) {
                    ActuatorModel::Residual { net } => ActuatorModel::Residual { net: net.with_normalizer(norm) },
                    _ => unreachable!(),
                },
                _ => ActuatorModel::Mlp { net: Mlp::glorot(&NN_SIZES, seed).with_normalizer(norm) },
            }
        }
        ModelFamily::TorqueOracle => ActuatorModel::torque_sequence(vec![0.0; data.test.len() - 1], cfg.segmentation.horizon),
        ModelFamily::BenchSup => ActuatorModel::BenchSup {
            pwm: cfg.bench_pwm(),
            map: Mlp::glorot(&BENCH_SIZES, derive_seed(req.seed, "bench-init")),
        },
    })
}

fn parameterization(model: ActuatorModel, req: &FitRequest<'_>) -> Result<Parameterization> {
    let mut joint: JointTerms = req.cfg.model.joint;
    if let Some(f) = &req.init_from {
        for (slot, v) in [
            (&mut joint.armature, f.plant.armature),
            (&mut joint.damping, f.plant.damping),
            (&mut joint.frictionloss, f.plant.frictionloss),
        ] {
            if slot.is_some() && v.is_some() {
                *slot = v;
            }
        }
    }
    Parameterization::with_joint(model, joint)
}

/// Fits one model family on the dataset.
pub fn fit_family(family: ModelFamily, req: &FitRequest<'_>, data: &Dataset) -> Result<FittedModel> {
    let cfg = req.cfg;
    let started = Instant::now();
    let model = starting_model(family, req, data)?;
    let expected = match family {
        ModelFamily::TrajidParam | ModelFamily::ParamEs => "pd",
        ModelFamily::TrajidNn | ModelFamily::NnEs => "mlp",
        ModelFamily::TorqueOracle => "torque-sequence",
        ModelFamily::BenchSup => "bench-sup",
        ModelFamily::Residual => "residual",
    };
    if model.kind() != expected {
        return Err(Error::Usage(format!("{family} fits a {expected} model, the starting model is {}", model.kind())));
    }
    let mut opt = cfg.optimizer.clone();
    opt.seed = derive_seed(req.seed, "optimizer");
    opt.workers = req.workers;
    let mut es = cfg.es.clone();
    es.seed = derive_seed(req.seed, "es");
    es.workers = req.workers;
    let (file, report) = match family {
        ModelFamily::TrajidParam | ModelFamily::TrajidNn | ModelFamily::Residual => {
            if family != ModelFamily::TrajidParam {
                opt.eval_every = cfg.nn.eval_every;
            }
            let p = parameterization(model, req)?;
            let out = fit_gradient(&p, &data.train, &cfg.segmentation, &cfg.weights, &opt, &cfg.plant, &cfg.simulation)?;
            (out.model_file()?, out.report)
        }
        ModelFamily::ParamEs | ModelFamily::NnEs => {
            if let Some(b) = req.es_budget {
                es.max_evaluations = Some(b);
            }
            let p = parameterization(model, req)?;
            let out = fit_es(&p, &data.train, &cfg.segmentation, &cfg.weights, &es, &cfg.plant, &cfg.simulation)?;
            (out.model_file()?, out.report)
        }
        ModelFamily::TorqueOracle => {
            let seg = SegmentationConfig { overlap: cfg.oracle.overlap, batching: Batching::Full, ..cfg.segmentation.clone() };
            opt.learning_rate = cfg.oracle.learning_rate;
            opt.max_epochs = cfg.oracle.max_epochs;
            opt.eval_every = cfg.oracle.eval_every;
            if model.param_count() != data.test.len() - 1 {
                return Err(Error::Usage(format!(
                    "torque sequence has {} entries but the held-out log has {} steps",
                    model.param_count(),
                    data.test.len() - 1
                )));
            }
            let p = Parameterization::new(model);
            let out = fit_gradient(&p, &data.test, &seg, &cfg.weights, &opt, &cfg.plant, &cfg.simulation)?;
            (out.model_file()?, out.report)
        }
        ModelFamily::BenchSup => {
            let stand = data.stand.as_ref().ok_or_else(|| Error::Usage("bench-sup needs a stand sweep (stand.csv)".into()))?;
            let ActuatorModel::BenchSup { pwm, map } = model else { unreachable!() };
            let mut sup = cfg.bench.supervised.clone();
            sup.seed = derive_seed(req.seed, "bench");
            let (map, report) = fit_bench_supervised(stand, &map, &sup)?;
            let best = report.best_loss;
            (ModelFile::new(ActuatorModel::BenchSup { pwm, map }, Default::default(), Some(best)), report)
        }
    };
    Ok(FittedModel { family, file, report, fit_seconds: started.elapsed().as_secs_f64() })
}
