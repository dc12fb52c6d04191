//! Experiment harness: JSON configs, binary checkpoints, and the
//! subcommands behind the `rectflow` binary. Everything here is a thin,
//! deterministic shell over the library modules — no numerics of its own.
//!
//! # Config files
//!
//! A config is a single JSON object; unknown keys anywhere in it are
//! rejected so typos fail loudly instead of silently training the wrong
//! model. The full schema, with optional fields at their defaults:
//!
//! ```json
//! {
//!   "method": "ml",
//!   "estimator": {"kind": "exact"},
//!   "dims": {"ambient": 2, "latent": 1},
//!   "flow": {
//!     "couplings": 5, "hidden": [10, 10], "permute": false,
//!     "low_couplings": 0, "low_hidden": [], "low_permute": false,
//!     "low_affine": false
//!   },
//!   "beta": 50.0,
//!   "annealing": {"start": 500, "full": 1000},
//!   "lr": 0.001,
//!   "batch_size": 1000,
//!   "max_epochs": 1150,
//!   "patience": 50,
//!   "criterion": "full_objective",
//!   "jitter": 0.0,
//!   "seed": 7,
//!   "dataset": {"kind": "circle", "n": 10000, "loc": 1.5707963, "concentration": 1.0},
//!   "output_dir": "runs"
//! }
//! ```
//!
//! `method` is `"ml"` (joint maximum likelihood) or `"two_step"` (the
//! alternating reconstruction/likelihood baseline). The estimator is
//! `{"kind": "exact"}` or `{"kind": "stochastic", "probes": K,
//! "tolerance": δ, "distribution": "gaussian" | "rademacher"}`; the
//! stochastic knobs are meaningless for the exact path and are rejected
//! there. Datasets are `{"kind": "circle", ...}` (the von Mises circle,
//! two columns) or `{"kind": "csv", "path": ..., "standardize": true}`
//! (headerless numeric CSV, z-scored by default with constant columns
//! dropped). Flag overrides passed by the binary beat the environment
//! variable `RECTFLOW_OUTPUT_DIR`, which beats the file value.
//!
//! The experiment `seed` fans out into independent streams — data
//! synthesis, parameter initialization, batch shuffling, post-training
//! sampling, self-checks — so every command is a pure function of
//! (config, seed). Wall-clock timings, the one unavoidably nondeterministic
//! output, are segregated into their own `timing.csv`.
//!
//! # Artifacts
//!
//! Every command creates its output directory and writes fixed file names
//! into it. Metric CSVs carry a header row naming every column; data-matrix
//! CSVs (`circle.csv`, `samples.csv`) are headerless so they can be fed
//! back in as datasets.
//!
//! | command    | writes                                                     |
//! |------------|------------------------------------------------------------|
//! | `simulate` | `circle.csv`                                               |
//! | `train`    | `metrics.csv`, `timing.csv`, `checkpoint.rnf` (best), `final.rnf`, `train_summary.json` |
//! | `eval`     | `eval.csv`, `eval_summary.json`                            |
//! | `sample`   | `samples.csv`                                              |
//! | `ood`      | `ood_report.json`, `ood_hist.csv`                          |
//! | `speed`    | `speed.csv`                                                |
//!
//! # Checkpoints
//!
//! A checkpoint is a single binary file, little-endian throughout:
//!
//! ```text
//! magic   8 bytes  "RNFCKPT\0"
//! version u32
//! header  u64 length + that many bytes of JSON
//!         (config snapshot, padding columns, standardization record,
//!          sampler RNG state)
//! count   u64 number of tensors
//! tensor  u64 name length, name (UTF-8),
//!         u64 rank, u64 per dimension,
//!         u64 value count, f64 per value
//! ```
//!
//! Loading rebuilds the model from the config snapshot (construction is
//! deterministic given the seed, so layer structure and permutations come
//! back identical) and overwrites every parameter bitwise; a reloaded
//! checkpoint therefore reproduces evaluation outputs bit for bit.
//!
//! # Exit codes
//!
//! The binary maps errors to stable codes via [`exit_code`]:
//!
//! | code | meaning                                                      |
//! |------|--------------------------------------------------------------|
//! | 0    | success                                                      |
//! | 1    | unclassified error                                           |
//! | 2    | command-line usage error                                     |
//! | 3    | config parse or validation failure                           |
//! | 4    | missing or unreadable file                                   |
//! | 5    | malformed checkpoint                                         |
//! | 6    | checkpoint version mismatch                                  |
//! | 7    | data CSV parse error                                         |
//! | 8    | numerical failure (non-finite values, indefinite systems, aborted training) |
//! | 9    | failed gradient/solver self-check                            |

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{jvp, vjp, ParamStore, Tensor};
use crate::data::{
    apply_standardization, load_tabular_csv, sample_von_mises_circle, save_csv, split_indices,
    Dataset,
};
use crate::error::{Error, Result};
use crate::estimators::{
    build_jacobian, cg_solve, grad_logdet_exact, logdet_jtj_exact, logdet_surrogate_stochastic,
    CostCounters, GradEstimator, ProbeDistribution, StochasticSettings,
};
use crate::flows::{FlowLayer, SquareFlow};
use crate::linalg::{cholesky_lower, cholesky_solve};
use crate::metrics::{eval_log_likelihoods, fid_like, ood_report, OodReport};
use crate::rectangular::{speed_profile, speed_ratio, ExactLogDet, PadSpec, RectangularFlow};
use crate::training::{fit, EpochMetrics, Method, ObjectiveConfig, StopCriterion, TrainConfig, TrainReport};

/// First eight bytes of every checkpoint file.
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"RNFCKPT\0";
/// Format version this build writes and reads.
pub const CHECKPOINT_VERSION: u32 = 1;
/// Environment variable the binary consults for the output directory.
pub const OUTPUT_DIR_ENV: &str = "RECTFLOW_OUTPUT_DIR";

// The experiment seed, xored with one salt per purpose, seeds one
// independent ChaCha stream each; the salts only need to be distinct.
const MODEL_SEED_SALT: u64 = 0x6d6f_6465_6c5f_696e; // parameter initialization
const TRAIN_SEED_SALT: u64 = 0x7472_6169_6e5f_7267; // batch shuffling / probes
const SAMPLER_SEED_SALT: u64 = 0x7361_6d70_6c65_7267; // post-training sampling
const GRADCHECK_SEED_SALT: u64 = 0x6772_6164_6368_6b30; // self-check draws

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

// ---------------------------------------------------------------------------
// Config schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodConfig {
    Ml,
    TwoStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Exact,
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionConfig {
    Gaussian,
    Rademacher,
}

/// Estimator selection. The stochastic knobs (`probes`, `tolerance`,
/// `distribution`) may only appear when `kind` is `"stochastic"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<DistributionConfig>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            kind: EstimatorKind::Exact,
            probes: None,
            tolerance: None,
            distribution: None,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            EstimatorKind::Exact => {
                if self.probes.is_some() || self.tolerance.is_some() || self.distribution.is_some()
                {
                    return Err(config_err(
                        "the exact estimator takes no probes/tolerance/distribution",
                    ));
                }
            }
            EstimatorKind::Stochastic => {
                if self.probes == Some(0) {
                    return Err(config_err("stochastic estimator needs at least one probe"));
                }
                if self.tolerance.is_some_and(|t| !(t >= 0.0)) {
                    return Err(config_err("tolerance must be a finite value >= 0"));
                }
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<GradEstimator> {
        self.validate()?;
        Ok(match self.kind {
            EstimatorKind::Exact => GradEstimator::Exact,
            EstimatorKind::Stochastic => GradEstimator::Stochastic(StochasticSettings {
                probes: self.probes.unwrap_or(1),
                tolerance: self.tolerance.unwrap_or(0.0),
                distribution: match self.distribution.unwrap_or(DistributionConfig::Gaussian) {
                    DistributionConfig::Gaussian => ProbeDistribution::Gaussian,
                    DistributionConfig::Rademacher => ProbeDistribution::Rademacher,
                },
            }),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimsConfig {
    /// Data dimension D.
    pub ambient: usize,
    /// Manifold dimension d.
    pub latent: usize,
}

/// Architecture of the two bijections. `couplings`/`hidden`/`permute`
/// describe the ambient-space flow; the `low_*` fields describe the flow on
/// the latent space (zero couplings plus `low_affine: false` leaves it the
/// identity). `low_affine` appends one learnable diagonal affine layer,
/// the only option with any parameters when the latent space is
/// one-dimensional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub couplings: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub permute: bool,
    #[serde(default)]
    pub low_couplings: usize,
    #[serde(default)]
    pub low_hidden: Vec<usize>,
    #[serde(default)]
    pub low_permute: bool,
    #[serde(default)]
    pub low_affine: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealingConfig {
    /// Epoch at which the likelihood weight starts rising from zero.
    pub start: usize,
    /// Epoch at which it reaches one.
    pub full: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionConfig {
    FullObjective,
    FidLike,
}

impl Default for CriterionConfig {
    fn default() -> Self {
        CriterionConfig::FullObjective
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Circle,
    Csv,
}

/// Dataset selection. Circle fields (`n`, `loc`, `concentration`) and CSV
/// fields (`path`, `standardize`) are mutually exclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concentration: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardize: Option<bool>,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DatasetKind::Circle => {
                if self.path.is_some() || self.standardize.is_some() {
                    return Err(config_err("circle dataset takes no path/standardize"));
                }
                if self.circle_n() < 10 {
                    return Err(config_err("circle dataset needs at least 10 points"));
                }
                if !(self.circle_concentration() > 0.0) {
                    return Err(config_err("concentration must be positive"));
                }
            }
            DatasetKind::Csv => {
                if self.n.is_some() || self.loc.is_some() || self.concentration.is_some() {
                    return Err(config_err("csv dataset takes no n/loc/concentration"));
                }
                if self.path.is_none() {
                    return Err(config_err("csv dataset needs a path"));
                }
            }
        }
        Ok(())
    }

    pub fn circle_n(&self) -> usize {
        self.n.unwrap_or(10_000)
    }

    pub fn circle_loc(&self) -> f64 {
        self.loc.unwrap_or(0.0)
    }

    pub fn circle_concentration(&self) -> f64 {
        self.concentration.unwrap_or(1.0)
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// One experiment, fully specified. See the module docs for the JSON shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: MethodConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    pub dims: DimsConfig,
    pub flow: FlowConfig,
    pub beta: f64,
    pub annealing: AnnealingConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    #[serde(default)]
    pub criterion: CriterionConfig,
    #[serde(default)]
    pub jitter: f64,
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Every internal consistency check; no file access, no compute.
    /// (Whether a dataset actually has `dims.ambient` columns can only be
    /// known once it is materialized, so that check lives with the data
    /// loading.)
    pub fn validate(&self) -> Result<()> {
        let DimsConfig { ambient, latent } = self.dims;
        if latent == 0 || latent > ambient {
            return Err(config_err(format!(
                "need 1 <= latent <= ambient, got latent {latent}, ambient {ambient}"
            )));
        }
        if self.flow.couplings > 0 && ambient < 2 {
            return Err(config_err(
                "coupling layers need an ambient dimension of at least 2",
            ));
        }
        if self.flow.low_couplings > 0 && latent < 2 {
            return Err(config_err(
                "latent coupling layers need a latent dimension of at least 2; \
                 use low_affine for a one-dimensional latent flow",
            ));
        }
        if !(self.beta > 0.0) {
            return Err(config_err(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if self.annealing.start > self.annealing.full {
            return Err(config_err(format!(
                "annealing window is reversed: start {} > full {}",
                self.annealing.start, self.annealing.full
            )));
        }
        if !(self.lr > 0.0) {
            return Err(config_err(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(config_err("max_epochs must be at least 1"));
        }
        if self.patience == 0 {
            return Err(config_err("patience must be at least 1"));
        }
        if !(self.jitter >= 0.0) {
            return Err(config_err("jitter must be a finite value >= 0"));
        }
        self.estimator.validate()?;
        self.dataset.validate()?;
        Ok(())
    }

    /// The training-loop view of this config.
    pub fn train_config(&self) -> Result<TrainConfig> {
        self.validate()?;
        Ok(TrainConfig {
            objective: ObjectiveConfig {
                method: match self.method {
                    MethodConfig::Ml => Method::Ml,
                    MethodConfig::TwoStep => Method::TwoStep,
                },
                beta: self.beta,
                anneal_start: self.annealing.start,
                anneal_full: self.annealing.full,
                estimator: self.estimator.build()?,
                jitter: self.jitter,
            },
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            criterion: match self.criterion {
                CriterionConfig::FullObjective => StopCriterion::FullObjective,
                CriterionConfig::FidLike => StopCriterion::FidLike,
            },
            seed: self.seed ^ TRAIN_SEED_SALT,
        })
    }
}

/// Values the binary may force over the config file; `None` leaves the file
/// value in place. The binary fills `output_dir` from its flag or, failing
/// that, from `RECTFLOW_OUTPUT_DIR`, so the precedence is flag > env > file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub max_epochs: Option<usize>,
    pub beta: Option<f64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub patience: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(v) = self.max_epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
    }
}

/// Reads a config file, applies overrides, validates. Parse failures
/// (including unknown keys) and semantic failures both come back as config
/// errors naming the file.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    overrides.apply(&mut cfg);
    cfg.validate()
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Model and dataset construction
// ---------------------------------------------------------------------------

/// Builds the rectangular flow a config describes, parameters freshly
/// initialized from the config seed. Construction is deterministic: the
/// same config always yields the same layer structure, parameter names, and
/// initial values.
pub fn build_model(cfg: &ExperimentConfig) -> Result<(RectangularFlow, ParamStore)> {
    cfg.validate()?;
    let dd = cfg.dims.ambient;
    let d = cfg.dims.latent;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ MODEL_SEED_SALT);
    let f_big = if cfg.flow.couplings == 0 {
        SquareFlow::identity(dd)
    } else {
        SquareFlow::realnvp(
            &mut store,
            &mut rng,
            "f",
            dd,
            cfg.flow.couplings,
            &cfg.flow.hidden,
            cfg.flow.permute,
        )
    };
    let mut h_layers: Vec<FlowLayer> = Vec::new();
    if cfg.flow.low_couplings > 0 {
        let nvp = SquareFlow::realnvp(
            &mut store,
            &mut rng,
            "h",
            d,
            cfg.flow.low_couplings,
            &cfg.flow.low_hidden,
            cfg.flow.low_permute,
        );
        h_layers.extend_from_slice(nvp.layers());
    }
    if cfg.flow.low_affine {
        let log_scale = store.register("h.affine.log_scale", Tensor::vector(vec![0.0; d]));
        let shift = store.register("h.affine.shift", Tensor::vector(vec![0.0; d]));
        h_layers.push(FlowLayer::DiagAffine { log_scale, shift });
    }
    let h_low = SquareFlow::from_layers(d, h_layers);
    let pad = PadSpec::identity(d, dd)?;
    let rf = RectangularFlow::new(f_big, pad, h_low)?;
    Ok((rf, store))
}

/// Materializes the dataset a config describes and checks its width against
/// `dims.ambient` — the earliest point at which that width is knowable.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.dataset.validate()?;
    let ds = match cfg.dataset.kind {
        DatasetKind::Circle => Dataset::circle(
            cfg.dataset.circle_n(),
            cfg.dataset.circle_loc(),
            cfg.dataset.circle_concentration(),
            cfg.seed,
        ),
        DatasetKind::Csv => {
            let path = cfg.dataset.path.as_ref().expect("validated");
            if cfg.dataset.standardize.unwrap_or(true) {
                Dataset::from_csv(path, cfg.seed)?
            } else {
                let data = load_tabular_csv(path)?;
                let splits = split_indices(data.rows(), cfg.seed);
                Dataset {
                    splits,
                    standardization: None,
                    provenance: format!("csv({}, raw, seed={})", path.display(), cfg.seed),
                    data,
                }
            }
        }
    };
    if ds.dim() != cfg.dims.ambient {
        return Err(config_err(format!(
            "dataset provides {} columns but dims.ambient is {}",
            ds.dim(),
            cfg.dims.ambient
        )));
    }
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Serializable state of one ChaCha sampling stream, captured bit for bit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    pub word_pos_lo: u64,
    pub word_pos_hi: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos_lo: pos as u64,
            word_pos_hi: (pos >> 64) as u64,
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self.seed.as_slice().try_into().map_err(|_| {
            Error::CheckpointFormat(format!(
                "rng seed must be 32 bytes, found {}",
                self.seed.len()
            ))
        })?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        Ok(rng)
    }
}

/// JSON part of the checkpoint file.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: ExperimentConfig,
    pad_columns: Vec<usize>,
    standardization: Option<crate::data::Standardization>,
    rng: RngState,
}

/// A trained (or initialized) model frozen to disk: the config it came
/// from, the padding columns, the dataset standardization record when one
/// applies, the sampler RNG state, and every parameter tensor by name.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub pad_columns: Vec<usize>,
    pub standardization: Option<crate::data::Standardization>,
    pub rng: RngState,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CheckpointFormat(format!(
                "truncated while reading {what}"
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v)
            .map_err(|_| Error::CheckpointFormat(format!("{what} length {v} does not fit")))
    }
}

impl Checkpoint {
    /// Freezes a live model. `rng` is the sampling stream later `sample`
    /// and `eval` calls continue from.
    pub fn from_model(
        config: &ExperimentConfig,
        rf: &RectangularFlow,
        store: &ParamStore,
        standardization: Option<&crate::data::Standardization>,
        rng: &ChaCha8Rng,
    ) -> Self {
        Checkpoint {
            config: config.clone(),
            pad_columns: rf.pad_spec().columns().to_vec(),
            standardization: standardization.cloned(),
            rng: RngState::capture(rng),
            tensors: store
                .iter()
                .map(|(_, name, t)| (name.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            pad_columns: self.pad_columns.clone(),
            standardization: self.standardization.clone(),
            rng: self.rng.clone(),
        })?;
        let mut buf = Vec::new();
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u64(&mut buf, header.len() as u64);
        buf.extend_from_slice(&header);
        put_u64(&mut buf, self.tensors.len() as u64);
        for (name, tensor) in &self.tensors {
            put_u64(&mut buf, name.len() as u64);
            buf.extend_from_slice(name.as_bytes());
            put_u64(&mut buf, tensor.shape().len() as u64);
            for &dim in tensor.shape() {
                put_u64(&mut buf, dim as u64);
            }
            put_u64(&mut buf, tensor.numel() as u64);
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        let mut r = ByteReader { buf: &bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointFormat(format!(
                "{} does not start with the checkpoint magic",
                path.display()
            )));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header_len = r.len("header length")?;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len, "header")?)
            .map_err(|e| Error::CheckpointFormat(format!("header: {e}")))?;
        let count = r.len("tensor count")?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.len("tensor name length")?;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|e| Error::CheckpointFormat(format!("tensor name: {e}")))?;
            let rank = r.len("tensor rank")?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len("tensor dimension")?);
            }
            let numel = r.len("tensor value count")?;
            if numel != shape.iter().product::<usize>() {
                return Err(Error::CheckpointFormat(format!(
                    "tensor {name}: {numel} values do not fill shape {shape:?}"
                )));
            }
            let raw = r.take(numel * 8, "tensor values")?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data)));
        }
        if r.pos != bytes.len() {
            return Err(Error::CheckpointFormat(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config: header.config,
            pad_columns: header.pad_columns,
            standardization: header.standardization,
            rng: header.rng,
            tensors,
        })
    }

    /// Rebuilds the live model this checkpoint froze: same structure from
    /// the config snapshot, every parameter overwritten bitwise, sampler
    /// stream restored.
    pub fn instantiate(&self) -> Result<(RectangularFlow, ParamStore, ChaCha8Rng)> {
        let (rf, mut store) = build_model(&self.config)?;
        if rf.pad_spec().columns() != self.pad_columns.as_slice() {
            return Err(Error::CheckpointFormat(format!(
                "padding columns {:?} do not match the rebuilt model's {:?}",
                self.pad_columns,
                rf.pad_spec().columns()
            )));
        }
        if self.tensors.len() != store.len() {
            return Err(Error::CheckpointFormat(format!(
                "checkpoint carries {} tensors, the model declares {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, tensor) in &self.tensors {
            let id = store.lookup(name).ok_or_else(|| {
                Error::CheckpointFormat(format!(
                    "checkpoint tensor {name} does not exist in the rebuilt model"
                ))
            })?;
            if store.get(id).shape() != tensor.shape() {
                return Err(Error::CheckpointFormat(format!(
                    "tensor {name}: checkpoint shape {:?} vs model shape {:?}",
                    tensor.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = tensor.clone();
        }
        let rng = self.rng.restore()?;
        Ok((rf, store, rng))
    }
}

// ---------------------------------------------------------------------------
// Shared command plumbing
// ---------------------------------------------------------------------------

fn csv_write_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv write to {}: {other:?}", path.display())),
    }
}

fn write_metric_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_write_err(path, e))?;
    w.write_record(header).map_err(|e| csv_write_err(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_write_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn load_for_eval(ckpt: &Checkpoint, path: &Path) -> Result<Tensor> {
    let raw = load_tabular_csv(path)?;
    match &ckpt.standardization {
        Some(stats) => apply_standardization(&raw, stats),
        None => Ok(raw),
    }
}

fn expect_width(data: &Tensor, rf: &RectangularFlow) -> Result<()> {
    if data.cols() != rf.high_dim() {
        return Err(config_err(format!(
            "data provides {} columns but the model expects {}",
            data.cols(),
            rf.high_dim()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Draws the circle dataset the config describes and writes it, headerless,
/// to `circle.csv`. Identical config and seed give identical bytes.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    if cfg.dataset.kind != DatasetKind::Circle {
        return Err(config_err("simulate draws the circle dataset; this config uses csv data"));
    }
    let data = sample_von_mises_circle(
        cfg.dataset.circle_n(),
        cfg.dataset.circle_loc(),
        cfg.dataset.circle_concentration(),
        cfg.seed,
    );
    fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join("circle.csv");
    save_csv(&path, &data)?;
    Ok(path)
}

/// Everything `cmd_train` leaves behind.
#[derive(Debug)]
pub struct TrainOutputs {
    pub report: TrainReport,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub timing_csv: PathBuf,
    pub summary_json: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainSummary {
    provenance: String,
    epochs_run: usize,
    best_epoch: usize,
    best_value: f64,
    stopped_early: bool,
    total_jvp_calls: usize,
    total_vjp_calls: usize,
    aborted: Option<String>,
}

fn metrics_rows(epochs: &[EpochMetrics]) -> Vec<Vec<String>> {
    epochs
        .iter()
        .map(|m| {
            vec![
                m.epoch.to_string(),
                format!("{}", m.lambda),
                format!("{}", m.train_loss),
                format!("{}", m.train_recon),
                format!("{}", m.val_value),
                format!("{}", m.val_recon),
                m.val_excluded.to_string(),
                m.cg_unconverged.to_string(),
                m.jvp_calls.to_string(),
                m.vjp_calls.to_string(),
            ]
        })
        .collect()
}

/// Trains the configured model and writes the per-epoch metric CSV, the
/// wall-clock CSV, the best and final checkpoints, and a JSON summary. When
/// training aborts on a numerical failure the artifacts (holding the last
/// good state) are still written, and the abort comes back as an error so
/// the process exits nonzero.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutputs> {
    let train_cfg = cfg.train_config()?;
    let dataset = build_dataset(cfg)?;
    let (rf, mut store) = build_model(cfg)?;
    let train = dataset.train();
    let val = dataset.val();
    let report = fit(&rf, &mut store, &train, &val, &train_cfg)?;

    fs::create_dir_all(&cfg.output_dir)?;
    let metrics_csv = cfg.output_dir.join("metrics.csv");
    let header: Vec<String> = [
        "epoch",
        "lambda",
        "train_loss",
        "train_recon",
        "val_value",
        "val_recon",
        "val_excluded",
        "cg_unconverged",
        "jvp_calls",
        "vjp_calls",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    write_metric_csv(&metrics_csv, &header, &metrics_rows(&report.epochs))?;

    let timing_csv = cfg.output_dir.join("timing.csv");
    let timing_rows: Vec<Vec<String>> = report
        .epochs
        .iter()
        .map(|m| vec![m.epoch.to_string(), format!("{}", m.wall_ms)])
        .collect();
    write_metric_csv(
        &timing_csv,
        &["epoch".to_string(), "wall_ms".to_string()],
        &timing_rows,
    )?;

    let sampler = ChaCha8Rng::seed_from_u64(cfg.seed ^ SAMPLER_SEED_SALT);
    let best_checkpoint = cfg.output_dir.join("checkpoint.rnf");
    Checkpoint::from_model(
        cfg,
        &rf,
        &report.best_params,
        dataset.standardization.as_ref(),
        &sampler,
    )
    .save(&best_checkpoint)?;
    let final_checkpoint = cfg.output_dir.join("final.rnf");
    Checkpoint::from_model(cfg, &rf, &store, dataset.standardization.as_ref(), &sampler)
        .save(&final_checkpoint)?;

    let summary_json = cfg.output_dir.join("train_summary.json");
    write_json(
        &summary_json,
        &TrainSummary {
            provenance: dataset.provenance.clone(),
            epochs_run: report.epochs.len(),
            best_epoch: report.best_epoch,
            best_value: report.best_value,
            stopped_early: report.stopped_early,
            total_jvp_calls: report.counters.jvp_calls,
            total_vjp_calls: report.counters.vjp_calls,
            aborted: report.aborted.clone(),
        },
    )?;

    if let Some(reason) = &report.aborted {
        return Err(Error::TrainingAborted {
            epoch: report.epochs.len(),
            reason: reason.clone(),
        });
    }
    Ok(TrainOutputs {
        report,
        best_checkpoint,
        final_checkpoint,
        metrics_csv,
        timing_csv,
        summary_json,
    })
}

/// Aggregates `cmd_eval` reports next to its per-point CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub points: usize,
    pub excluded: usize,
    pub mean_log_likelihood: Option<f64>,
    pub mean_reconstruction: f64,
    pub fid_like: f64,
}

#[derive(Debug)]
pub struct EvalOutputs {
    pub summary: EvalSummary,
    pub csv: PathBuf,
    pub summary_json: PathBuf,
}

/// Exact per-point log-likelihoods and reconstruction errors on a dataset —
/// the held-out test split of the checkpoint's own dataset by default, or
/// any CSV (standardized with the training-time record when one exists) —
/// plus the moment distance between the data and a same-size model sample.
pub fn cmd_eval(
    checkpoint: &Path,
    data_csv: Option<&Path>,
    output_dir: Option<&Path>,
) -> Result<EvalOutputs> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (rf, store, mut rng) = ckpt.instantiate()?;
    let data = match data_csv {
        Some(p) => load_for_eval(&ckpt, p)?,
        None => build_dataset(&ckpt.config)?.test(),
    };
    expect_width(&data, &rf)?;
    let opts = ExactLogDet {
        jitter: ckpt.config.jitter,
    };
    let eval = eval_log_likelihoods(&rf, &store, &data, opts)?;
    let samples = rf.sample(&store, &mut rng, data.rows())?;
    let fid = fid_like(&data, &samples)?;

    let dir = output_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt.config.output_dir.clone());
    fs::create_dir_all(&dir)?;
    let csv = dir.join("eval.csv");
    let rows: Vec<Vec<String>> = eval
        .log_likelihoods
        .iter()
        .zip(&eval.reconstruction_errors)
        .map(|(ll, recon)| {
            vec![
                ll.map(|v| format!("{v}")).unwrap_or_default(),
                format!("{recon}"),
            ]
        })
        .collect();
    write_metric_csv(
        &csv,
        &["log_likelihood".to_string(), "reconstruction_error".to_string()],
        &rows,
    )?;

    let mean_recon = eval.reconstruction_errors.iter().sum::<f64>() / data.rows().max(1) as f64;
    let summary = EvalSummary {
        points: data.rows(),
        excluded: eval.excluded,
        mean_log_likelihood: eval.mean_log_likelihood(),
        mean_reconstruction: mean_recon,
        fid_like: fid,
    };
    let summary_json = dir.join("eval_summary.json");
    write_json(&summary_json, &summary)?;
    Ok(EvalOutputs {
        summary,
        csv,
        summary_json,
    })
}

/// Draws `n` samples from a checkpoint and writes them, headerless, to
/// `samples.csv` in the original data scale (standardization undone when a
/// record exists). The sampler stream is restored from the checkpoint, so
/// the same file always yields the same samples.
pub fn cmd_sample(checkpoint: &Path, n: usize, output_dir: Option<&Path>) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::invalid("sample needs n >= 1"));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let (rf, store, mut rng) = ckpt.instantiate()?;
    let samples = rf.sample(&store, &mut rng, n)?;
    let samples = match &ckpt.standardization {
        Some(stats) => crate::data::unstandardize(&samples, stats),
        None => samples,
    };
    let dir = output_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt.config.output_dir.clone());
    fs::create_dir_all(&dir)?;
    let path = dir.join("samples.csv");
    save_csv(&path, &samples)?;
    Ok(path)
}

#[derive(Debug)]
pub struct OodOutputs {
    pub report: OodReport,
    pub report_json: PathBuf,
    pub histogram_csv: PathBuf,
}

/// Scores an in-distribution CSV against an out-of-distribution CSV:
/// per-point log-likelihoods for both, a decision-stump threshold with its
/// balanced accuracy, and a shared-binning histogram CSV for plotting.
pub fn cmd_ood(
    checkpoint: &Path,
    in_csv: &Path,
    out_csv: &Path,
    bins: usize,
    output_dir: Option<&Path>,
) -> Result<OodOutputs> {
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let (rf, store, _) = ckpt.instantiate()?;
    let in_data = load_for_eval(&ckpt, in_csv)?;
    let out_data = load_for_eval(&ckpt, out_csv)?;
    expect_width(&in_data, &rf)?;
    expect_width(&out_data, &rf)?;
    let opts = ExactLogDet {
        jitter: ckpt.config.jitter,
    };
    let report = ood_report(&rf, &store, &in_data, &out_data, opts)?;

    let dir = output_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt.config.output_dir.clone());
    fs::create_dir_all(&dir)?;
    let report_json = dir.join("ood_report.json");
    write_json(&report_json, &report)?;

    let kept_in: Vec<f64> = report.in_log_likelihoods.iter().flatten().copied().collect();
    let kept_out: Vec<f64> = report.out_log_likelihoods.iter().flatten().copied().collect();
    let lo = kept_in
        .iter()
        .chain(&kept_out)
        .copied()
        .fold(f64::INFINITY, f64::min);
    let mut hi = kept_in
        .iter()
        .chain(&kept_out)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let mut in_counts = vec![0usize; bins];
    let mut out_counts = vec![0usize; bins];
    for (values, counts) in [(&kept_in, &mut in_counts), (&kept_out, &mut out_counts)] {
        for &v in values {
            let idx = (((v - lo) / width) as usize).min(bins - 1);
            counts[idx] += 1;
        }
    }
    let histogram_csv = dir.join("ood_hist.csv");
    let rows: Vec<Vec<String>> = (0..bins)
        .map(|b| {
            vec![
                format!("{}", lo + b as f64 * width),
                format!("{}", lo + (b + 1) as f64 * width),
                in_counts[b].to_string(),
                out_counts[b].to_string(),
            ]
        })
        .collect();
    write_metric_csv(
        &histogram_csv,
        &[
            "bin_low".to_string(),
            "bin_high".to_string(),
            "in_count".to_string(),
            "out_count".to_string(),
        ],
        &rows,
    )?;
    Ok(OodOutputs {
        report,
        report_json,
        histogram_csv,
    })
}

#[derive(Debug)]
pub struct SpeedOutputs {
    pub csv: PathBuf,
    /// Max/min arc length over the grid; 1 means the latent coordinate
    /// parameterizes the curve at perfectly constant speed.
    pub ratio: f64,
}

/// Sweeps a uniform grid through the one-dimensional latent space, maps it
/// through the decoder, and writes each grid point with its image and the
/// distance to the next image — the data behind speed-along-the-manifold
/// plots.
pub fn cmd_speed(
    checkpoint: &Path,
    lo: f64,
    hi: f64,
    steps: usize,
    output_dir: Option<&Path>,
) -> Result<SpeedOutputs> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (rf, store, _) = ckpt.instantiate()?;
    let profile = speed_profile(&rf, &store, lo, hi, steps)?;
    let h = (hi - lo) / (steps - 1) as f64;
    let grid = Tensor::new(
        vec![steps, 1],
        (0..steps).map(|i| lo + i as f64 * h).collect(),
    );
    let images = rf.forward(&store, &grid)?;
    let dd = rf.high_dim();

    let dir = output_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt.config.output_dir.clone());
    fs::create_dir_all(&dir)?;
    let csv = dir.join("speed.csv");
    let mut header = vec!["u".to_string()];
    for j in 0..dd {
        header.push(format!("x{j}"));
    }
    header.push("speed".to_string());
    let rows: Vec<Vec<String>> = (0..steps - 1)
        .map(|i| {
            let mut row = vec![format!("{}", grid.at(i, 0))];
            for j in 0..dd {
                row.push(format!("{}", images.at(i, j)));
            }
            row.push(format!("{}", profile[i]));
            row
        })
        .collect();
    write_metric_csv(&csv, &header, &rows)?;
    Ok(SpeedOutputs {
        csv,
        ratio: speed_ratio(&profile),
    })
}

// ---------------------------------------------------------------------------
// Gradcheck
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct GradcheckLine {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug)]
pub struct GradcheckReport {
    pub lines: Vec<GradcheckLine>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }

    pub fn failures(&self) -> usize {
        self.lines.iter().filter(|l| !l.passed).count()
    }

    /// Fixed-width pass/fail table, one row per suite.
    pub fn table(&self) -> String {
        let mut out = String::from(format!("{:<30} {:<6} detail\n", "check", "result"));
        for l in &self.lines {
            let verdict = if l.passed { "pass" } else { "FAIL" };
            out.push_str(&format!("{:<30} {:<6} {}\n", l.name, verdict, l.detail));
        }
        out
    }
}

/// Central finite difference of a fallible scalar with respect to every
/// parameter coordinate.
fn fd_param_grad(
    f: &mut dyn FnMut(&ParamStore) -> Result<f64>,
    store: &ParamStore,
    h: f64,
) -> Result<ParamStore> {
    let mut grads = store.zeros_like();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for k in 0..store.get(id).numel() {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[k] += h;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[k] -= h;
            grads.get_mut(id).data_mut()[k] = (f(&plus)? - f(&minus)?) / (2.0 * h);
        }
    }
    Ok(grads)
}

fn flatten(store: &ParamStore) -> Vec<f64> {
    let mut out = Vec::with_capacity(store.total_parameters());
    for (_, _, t) in store.iter() {
        out.extend_from_slice(t.data());
    }
    out
}

fn gaussian_row(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    Tensor::new(
        vec![1, d],
        (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    )
}

/// Runs the gradient and solver self-check suites on the configured model
/// (parameters jittered away from their identity initialization so nothing
/// passes by accident of symmetry):
///
/// 1. forward- and reverse-mode products agree through the pairing
///    identity v·(Je) = (vᵀJ)·e;
/// 2. the exact volume-term gradient matches central finite differences;
/// 3. the stochastic surrogate's gradient is an unbiased estimate of the
///    exact one (mean over many single-probe draws, per-coordinate
///    standard-error bound);
/// 4. matrix-free conjugate gradients match dense Cholesky solves;
/// 5. the cost counters account for exactly the products each path claims.
///
/// All draws come from a seeded stream, so a pass is reproducible.
pub fn cmd_gradcheck(cfg: &ExperimentConfig) -> Result<GradcheckReport> {
    cfg.validate()?;
    let (rf, mut store) = build_model(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ GRADCHECK_SEED_SALT);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let padded = rf.padded();
    let d = rf.low_dim();
    let dd = rf.high_dim();
    let mut lines = Vec::new();

    // 1. Pairing identity across independently seeded points.
    let mut max_pair = 0.0f64;
    for _ in 0..50 {
        let x = gaussian_row(&mut rng, d);
        let e = gaussian_row(&mut rng, d);
        let v = gaussian_row(&mut rng, dd);
        let je = jvp(&padded, &store, &x, &e)?.tangent;
        let vj = vjp(&padded, &store, &x, &v)?;
        let lhs: f64 = v.data().iter().zip(je.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = vj.data().iter().zip(e.data()).map(|(a, b)| a * b).sum();
        max_pair = max_pair.max((lhs - rhs).abs() / (1.0 + lhs.abs()));
    }
    lines.push(GradcheckLine {
        name: "pairing-identity",
        passed: max_pair < 1e-10,
        detail: format!("max rel {max_pair:.2e} over 50 draws (tol 1e-10)"),
    });

    // 2. Exact gradient vs central finite differences.
    let points: Vec<Tensor> = (0..3).map(|_| gaussian_row(&mut rng, d)).collect();
    let mut max_fd = 0.0f64;
    for point in &points {
        let mut counters = CostCounters::new();
        let (_, grads) = grad_logdet_exact(&padded, &store, point, &mut counters)?;
        let fd = fd_param_grad(
            &mut |s: &ParamStore| {
                let mut c = CostCounters::new();
                let j = build_jacobian(&padded, s, point, &mut c)?;
                logdet_jtj_exact(&j)
            },
            &store,
            1e-5,
        )?;
        for (a, b) in flatten(&grads).iter().zip(flatten(&fd).iter()) {
            max_fd = max_fd.max((a - b).abs() / a.abs().max(b.abs()).max(1.0));
        }
    }
    lines.push(GradcheckLine {
        name: "exact-vs-finite-differences",
        passed: max_fd < 1e-4,
        detail: format!("max rel {max_fd:.2e} over 3 points (tol 1e-4)"),
    });

    // 3. Surrogate unbiasedness: many single-probe draws against the exact
    // gradient, judged coordinate by coordinate in standard-error units.
    let point = &points[0];
    let mut counters = CostCounters::new();
    let (_, exact_grads) = grad_logdet_exact(&padded, &store, point, &mut counters)?;
    let exact_flat = flatten(&exact_grads);
    let reps = 400usize;
    let settings = StochasticSettings {
        probes: 1,
        tolerance: 0.0,
        distribution: ProbeDistribution::Gaussian,
    };
    let mut sum = vec![0.0; exact_flat.len()];
    let mut sumsq = vec![0.0; exact_flat.len()];
    for _ in 0..reps {
        let rep = logdet_surrogate_stochastic(
            &padded,
            &store,
            point,
            settings,
            &mut rng,
            &mut counters,
        )?;
        for (k, g) in flatten(&rep.gradients).into_iter().enumerate() {
            sum[k] += g;
            sumsq[k] += g * g;
        }
    }
    let mut worst_z = 0.0f64;
    let mut biased = false;
    for k in 0..exact_flat.len() {
        let mean = sum[k] / reps as f64;
        let var = ((sumsq[k] - sum[k] * sum[k] / reps as f64) / (reps - 1) as f64).max(0.0);
        let se = (var / reps as f64).sqrt();
        if se == 0.0 {
            if (mean - exact_flat[k]).abs() > 1e-12 {
                biased = true;
            }
        } else {
            let z = (mean - exact_flat[k]).abs() / se;
            worst_z = worst_z.max(z);
        }
    }
    let unbiased = !biased && worst_z < 5.0;
    lines.push(GradcheckLine {
        name: "stochastic-unbiasedness",
        passed: unbiased,
        detail: format!(
            "worst |mean-exact|/se {worst_z:.2} over {} coordinates, {reps} draws (bound 5)",
            exact_flat.len()
        ),
    });

    // 4. Matrix-free CG vs dense Cholesky on random SPD systems
    // (I + BᵀB/n, eigenvalues a few at most, so the iteration cap leaves
    // plenty of room below the agreement tolerance).
    let mut max_cg = 0.0f64;
    let mut cg_ok = true;
    for _ in 0..20 {
        let n = 2 + (rng.gen::<u64>() % 15) as usize;
        let mut b = vec![0.0; n * n];
        for v in b.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += b[k * n + i] * b[k * n + j];
                }
                a[i * n + j] = acc / n as f64 + if i == j { 1.0 } else { 0.0 };
            }
        }
        let rhs: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let solve = cg_solve(
            |w| {
                Ok((0..n)
                    .map(|i| (0..n).map(|j| a[i * n + j] * w[j]).sum())
                    .collect())
            },
            &rhs,
            0.0,
            None,
        )?;
        cg_ok &= solve.iterations <= n;
        let l = cholesky_lower(&a, n, "gradcheck dense solve")?;
        let dense = cholesky_solve(&l, n, &rhs);
        for (x, y) in solve.solution.iter().zip(&dense) {
            max_cg = max_cg.max((x - y).abs() / x.abs().max(y.abs()).max(1.0));
        }
    }
    lines.push(GradcheckLine {
        name: "cg-vs-dense-solve",
        passed: cg_ok && max_cg < 1e-8,
        detail: format!("max rel {max_cg:.2e} over 20 systems, iterations capped (tol 1e-8)"),
    });

    // 5. Cost accounting: the exact path pays d retained forward products
    // and no reverse ones; the stochastic path pays (iterations + 1)
    // products of each kind per probe, one of each retained.
    let mut exact_counters = CostCounters::new();
    grad_logdet_exact(&padded, &store, point, &mut exact_counters)?;
    let exact_ok = exact_counters.jvp_calls == d
        && exact_counters.jvp_retained == d
        && exact_counters.vjp_calls == 0;
    let k_probes = 3usize;
    let mut stoch_counters = CostCounters::new();
    let rep = logdet_surrogate_stochastic(
        &padded,
        &store,
        point,
        StochasticSettings {
            probes: k_probes,
            tolerance: 0.0,
            distribution: ProbeDistribution::Gaussian,
        },
        &mut rng,
        &mut stoch_counters,
    )?;
    let expected: usize = rep.cg_iterations.iter().map(|t| t + 1).sum();
    let stoch_ok = stoch_counters.jvp_calls == expected
        && stoch_counters.vjp_calls == expected
        && stoch_counters.jvp_retained == k_probes
        && stoch_counters.vjp_retained == k_probes;
    lines.push(GradcheckLine {
        name: "cost-counters",
        passed: exact_ok && stoch_ok,
        detail: format!(
            "exact {}/{} forward (expected {d}), stochastic {}/{} of each kind (expected {expected}, {k_probes} retained)",
            exact_counters.jvp_calls,
            exact_counters.jvp_retained,
            stoch_counters.jvp_calls,
            stoch_counters.jvp_retained,
        ),
    });

    Ok(GradcheckReport { lines })
}

// ---------------------------------------------------------------------------
// Exit codes
// ---------------------------------------------------------------------------

/// Stable process exit code for an error; see the module docs for the
/// table. Code 2 (usage) is produced by argument parsing before any of this
/// crate's errors can arise, and 0 is success.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 3,
        Error::Io(_) => 4,
        Error::CheckpointFormat(_) => 5,
        Error::CheckpointVersion { .. } => 6,
        Error::Parse { .. } => 7,
        Error::NonFinite { .. }
        | Error::NotPositiveDefinite { .. }
        | Error::CgNumeric { .. }
        | Error::CgIndefinite { .. }
        | Error::TrainingAborted { .. } => 8,
        Error::GradCheck(_) => 9,
        _ => 1,
    }
}
