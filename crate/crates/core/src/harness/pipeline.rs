use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calib::{calibrate_model, CalibConfig, CalibReport, Objective};
use crate::error::{Error, Result};
use crate::fisher::{
    block_weights, combine_tasks, estimate_diagonal_fisher, FisherTensor, ObjectiveMode,
};
use crate::model::{
    train_toy, DataSpec, SyntheticDataset, ToyModel, ToyModelConfig, TrainConfig, TrainReport,
};
use crate::qmodel::{QuantizedModel, TransformInit};
use crate::quant::{Granularity, QuantSpec};

use super::correlation::{correlation_experiment, CorrelationReport};
use super::eval::{evaluate, EvalReport};

pub const SCHEMA_VERSION: u32 = 1;
/// Calibration samples per run; also the Fisher sample count.
pub const DEFAULT_CALIB_SAMPLES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fp,
    Rtn,
    Hadamard,
    UniformAffine,
    Fgq,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Fp,
        Method::Rtn,
        Method::Hadamard,
        Method::UniformAffine,
        Method::Fgq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fp => "fp",
            Method::Rtn => "rtn",
            Method::Hadamard => "hadamard",
            Method::UniformAffine => "uniform_affine",
            Method::Fgq => "fgq",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{}`", s)))
    }
}

/// Sample counts of the three splits, drawn from one index space in the
/// order train, calibration, test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub data: DataSpec,
    pub n_train: usize,
    pub n_calib: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            data: DataSpec::new(42),
            n_train: 1024,
            n_calib: DEFAULT_CALIB_SAMPLES,
            n_test: 128,
        }
    }
}

impl DataConfig {
    pub fn splits<T: crate::Scalar>(
        &self,
        cfg: &ToyModelConfig,
    ) -> Result<(
        SyntheticDataset<T>,
        SyntheticDataset<T>,
        SyntheticDataset<T>,
    )> {
        let train = SyntheticDataset::generate(cfg, &self.data, 0, self.n_train)?;
        let calib = SyntheticDataset::generate(cfg, &self.data, self.n_train, self.n_calib)?;
        let test =
            SyntheticDataset::generate(cfg, &self.data, self.n_train + self.n_calib, self.n_test)?;
        Ok((train, calib, test))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ToyModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    /// Quantization bit-widths live here too (`w_bits`, `a_bits`).
    pub calib: CalibConfig,
    /// Gradient objective of the Fisher behind the FGQ weights.
    pub fisher_mode: ObjectiveMode,
    pub method: Method,
    /// Also run the per-block Fisher-vs-measured correlation experiment.
    pub correlation: bool,
    /// Artifact directory; not part of the config hash.
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ToyModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            calib: CalibConfig::default(),
            fisher_mode: ObjectiveMode::OutputSum,
            method: Method::Fgq,
            correlation: false,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Uses `seed` for the model init, data, training and calibration.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.data.data = DataSpec {
            noise_std: self.data.data.noise_std,
            ..DataSpec::new(seed)
        };
        self.train.seed = seed;
        self.calib.seed = seed;
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON of everything except `output_dir`.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&v)?)))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.data.n_calib < self.calib.batch_size || self.calib.batch_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "{} calibration samples cannot fill a batch of {}",
                self.data.n_calib, self.calib.batch_size
            )));
        }
        QuantSpec::new(self.calib.w_bits, Granularity::PerOutputChannel)?;
        QuantSpec::new(self.calib.a_bits, Granularity::PerToken)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_grad_norm: f64,
}

impl From<&TrainReport> for TrainSummary {
    fn from(r: &TrainReport) -> Self {
        Self {
            initial_loss: r.initial_loss,
            final_loss: r.final_loss,
            final_grad_norm: r.final_grad_norm,
        }
    }
}

/// Everything a run reports. Contains no timings, so it is a pure function
/// of the config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub method: Method,
    pub w_bits: u32,
    pub a_bits: u32,
    pub train: TrainSummary,
    pub eval: EvalReport,
    pub calibration: Option<CalibReport>,
    pub correlation: Option<CorrelationReport>,
}

fn stage<V>(name: &'static str, r: Result<V>) -> Result<V> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// File names of the artifacts written under `output_dir`.
pub mod artifacts {
    pub const CONFIG: &str = "config.json";
    pub const MODEL: &str = "model.ckpt";
    pub const TRAIN: &str = "train.json";
    pub const FISHER: &str = "fisher.bin";
    pub const QUANTIZED: &str = "quantized.ckpt";
    /// Config hash of the run that wrote `quantized.ckpt`.
    pub const QUANTIZED_STAMP: &str = "quantized.hash";
    pub const CALIB: &str = "calibration.json";
    pub const EVAL: &str = "eval.json";
    pub const REPORT_JSON: &str = "report.json";
    pub const REPORT_TEXT: &str = "report.txt";
}

fn write_json<V: Serialize>(path: &Path, v: &V) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(v)?)?;
    Ok(())
}

fn read_json<V: serde::de::DeserializeOwned>(path: &Path) -> Result<V> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

impl RunConfig {
    pub fn artifact(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

/// Trains the model on the train split and writes `model.ckpt` and
/// `train.json`.
pub fn train_stage(cfg: &RunConfig) -> Result<(ToyModel<f64>, TrainReport)> {
    stage(
        "train",
        (|| {
            cfg.validate()?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            cfg.save(&cfg.artifact(artifacts::CONFIG))?;
            let (train, _, _) = cfg.data.splits::<f64>(&cfg.model)?;
            let mut model = ToyModel::new(cfg.model.clone())?;
            let tr = train_toy(&mut model, &train, &cfg.train)?;
            model.save(&cfg.artifact(artifacts::MODEL))?;
            write_json(&cfg.artifact(artifacts::TRAIN), &tr)?;
            Ok((model, tr))
        })(),
    )
}

/// Trained model and training report from a previous [`train_stage`].
pub fn load_trained(cfg: &RunConfig) -> Result<(ToyModel<f64>, TrainReport)> {
    stage(
        "load",
        (|| {
            let model = ToyModel::load(&cfg.artifact(artifacts::MODEL))?;
            if model.config != cfg.model {
                return Err(Error::Format(
                    "model.ckpt was trained with a different model config".into(),
                ));
            }
            Ok((model, read_json(&cfg.artifact(artifacts::TRAIN))?))
        })(),
    )
}

/// Diagonal Fisher on the calibration split, written to `fisher.bin`.
pub fn fisher_stage(cfg: &RunConfig, model: &ToyModel<f64>) -> Result<FisherTensor> {
    stage(
        "fisher",
        (|| {
            std::fs::create_dir_all(&cfg.output_dir)?;
            let (_, calib, _) = cfg.data.splits::<f64>(&cfg.model)?;
            let f = estimate_diagonal_fisher(model, &calib, cfg.fisher_mode)?;
            f.save(&cfg.artifact(artifacts::FISHER))?;
            Ok(f)
        })(),
    )
}

/// Builds the quantized model for `cfg.method` (none for `fp`) and writes
/// `quantized.ckpt`, plus `calibration.json` for the calibrated methods.
pub fn calibrate_stage(
    cfg: &RunConfig,
    model: &ToyModel<f64>,
    fisher: Option<&FisherTensor>,
) -> Result<(Option<QuantizedModel<f64>>, Option<CalibReport>)> {
    stage(
        "calibrate",
        (|| {
            std::fs::create_dir_all(&cfg.output_dir)?;
            let (wspec, aspec) = (cfg.calib.wspec(), cfg.calib.aspec());
            let (qm, rep) = match cfg.method {
                Method::Fp => return Ok((None, None)),
                Method::Rtn => (
                    QuantizedModel::new(model.clone(), wspec, aspec, TransformInit::None)?,
                    None,
                ),
                Method::Hadamard => (
                    QuantizedModel::new(
                        model.clone(),
                        wspec,
                        aspec,
                        TransformInit::Hadamard {
                            seed: cfg.calib.seed,
                        },
                    )?,
                    None,
                ),
                Method::UniformAffine | Method::Fgq => {
                    let objective = if cfg.method == Method::Fgq {
                        Objective::Fgq
                    } else {
                        Objective::Uniform
                    };
                    let cc = CalibConfig {
                        objective,
                        ..cfg.calib.clone()
                    };
                    let weights = match fisher {
                        Some(f) => Some(block_weights(
                            &combine_tasks(f)?,
                            f.blocks,
                            f.channels,
                            cfg.calib.weight_floor,
                        )?),
                        None if objective == Objective::Fgq => {
                            return Err(Error::InvalidArgument(
                                "fgq needs a Fisher estimate".into(),
                            ))
                        }
                        None => None,
                    };
                    let (_, calib, _) = cfg.data.splits::<f64>(&cfg.model)?;
                    let (qm, rep) = calibrate_model(model, &calib, weights.as_ref(), &cc)?;
                    write_json(&cfg.artifact(artifacts::CALIB), &rep)?;
                    (qm, Some(rep))
                }
            };
            qm.save(&cfg.artifact(artifacts::QUANTIZED))?;
            std::fs::write(cfg.artifact(artifacts::QUANTIZED_STAMP), cfg.hash()?)?;
            Ok((Some(qm), rep))
        })(),
    )
}

/// Quantized model and calibration report from a previous
/// [`calibrate_stage`].
pub fn load_calibrated(
    cfg: &RunConfig,
    model: &ToyModel<f64>,
) -> Result<(Option<QuantizedModel<f64>>, Option<CalibReport>)> {
    stage(
        "load",
        (|| {
            if cfg.method == Method::Fp {
                return Ok((None, None));
            }
            let stamp = std::fs::read_to_string(cfg.artifact(artifacts::QUANTIZED_STAMP)).map_err(
                |_| {
                    Error::Format(format!(
                        "no quantized model in {}",
                        cfg.output_dir.display()
                    ))
                },
            )?;
            if stamp != cfg.hash()? {
                return Err(Error::Format(
                    "quantized.ckpt was written by a different run config".into(),
                ));
            }
            let qm = QuantizedModel::load(model.clone(), &cfg.artifact(artifacts::QUANTIZED))?;
            let rep = match cfg.method {
                Method::UniformAffine | Method::Fgq => {
                    Some(read_json(&cfg.artifact(artifacts::CALIB))?)
                }
                _ => None,
            };
            Ok((Some(qm), rep))
        })(),
    )
}

/// Evaluates on the test split, runs the optional correlation experiment
/// and writes `eval.json` and the reports.
pub fn report_stage(
    cfg: &RunConfig,
    model: &ToyModel<f64>,
    train: &TrainReport,
    qm: Option<&QuantizedModel<f64>>,
    calibration: Option<CalibReport>,
) -> Result<RunReport> {
    let hash = stage("config", cfg.hash())?;
    let (_, calib, test) = stage("data", cfg.data.splits::<f64>(&cfg.model))?;
    let eval = stage("evaluate", evaluate(model, qm, &test))?;
    stage(
        "evaluate",
        write_json(&cfg.artifact(artifacts::EVAL), &eval),
    )?;
    let correlation = if cfg.correlation {
        let (wspec, aspec) = (cfg.calib.wspec(), cfg.calib.aspec());
        Some(stage(
            "correlation",
            estimate_diagonal_fisher(model, &calib, ObjectiveMode::TaskLoss)
                .and_then(|f| correlation_experiment(model, &f, &calib, &test, wspec, aspec)),
        )?)
    } else {
        None
    };
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        config_hash: hash,
        method: cfg.method,
        w_bits: cfg.calib.w_bits,
        a_bits: cfg.calib.a_bits,
        train: TrainSummary::from(train),
        eval,
        calibration,
        correlation,
    };
    stage(
        "report",
        super::report::emit_report(&report, &cfg.output_dir),
    )?;
    Ok(report)
}

/// Runs train, Fisher (FGQ only), calibrate, evaluate and report, persisting
/// each stage's artifact under `cfg.output_dir`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunReport> {
    let (model, tr) = train_stage(cfg)?;
    let fisher = if cfg.method == Method::Fgq {
        Some(fisher_stage(cfg, &model)?)
    } else {
        None
    };
    let (qm, calibration) = calibrate_stage(cfg, &model, fisher.as_ref())?;
    report_stage(cfg, &model, &tr, qm.as_ref(), calibration)
}
