//! Experiment configuration: a sectioned key = value file covering every
//! knob, with defaults, strict unknown-key rejection, and a normalized
//! echo for replay and diffing.
//!
//! All randomness in a run flows from `[train] seed`, fanned out by fixed
//! labeled derivation (data / init / attack / shuffle / eval), so the
//! echoed config alone reproduces a run byte for byte.

use crate::attacks::{AttackConfig, Bounds, Norm};
use crate::data::{self, LabeledDataset};
use crate::infogain::IgConfig;
use crate::seeds;
use crate::svgd::{StepMode, SvgdConfig};
use crate::training::{StepSchedule, TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Read(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn default_count() -> usize {
    1000
}
fn default_noise() -> f64 {
    0.15
}
fn default_classes() -> usize {
    3
}
fn default_spread() -> f64 {
    0.1
}
fn default_train_frac() -> f64 {
    0.8
}

/// `[data]`: which dataset to generate or load, and how to split it.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// two_moons | gaussian_blobs | file
    pub kind: String,
    pub count: usize,
    pub noise: f64,
    pub classes: usize,
    pub spread: f64,
    /// Dataset path for kind = "file" (.igds or .csv).
    pub path: String,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            kind: "two_moons".into(),
            count: default_count(),
            noise: default_noise(),
            classes: default_classes(),
            spread: default_spread(),
            path: String::new(),
            train_frac: default_train_frac(),
            val_frac: 0.0,
        }
    }
}

/// `[network]`: hidden widths (input dim and class count come from data).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub hidden: Vec<usize>,
    pub prior_lambda: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            hidden: vec![16, 16],
            prior_lambda: 0.0,
        }
    }
}

/// `[svgd]`: particle count and update-rule knobs.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SvgdSection {
    pub particles: usize,
    pub gamma: f64,
    pub step_size: f64,
    /// constant | adaptive
    pub step_mode: String,
    /// 0 selects the median heuristic.
    pub bandwidth: f64,
}

impl Default for SvgdSection {
    fn default() -> Self {
        SvgdSection {
            particles: 10,
            gamma: 0.01,
            step_size: 0.1,
            step_mode: "constant".into(),
            bandwidth: 0.0,
        }
    }
}

/// `[attack]`: the training-time threat model.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    /// linf | l2
    pub norm: String,
    pub eps_max: f64,
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
    pub bounds_lo: f64,
    pub bounds_hi: f64,
    pub query_budget: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            norm: "linf".into(),
            eps_max: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 10,
            random_start: false,
            bounds_lo: 0.0,
            bounds_hi: 1.0,
            query_budget: 1000,
        }
    }
}

/// `[ig]`: information-gain penalty knobs.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct IgSection {
    pub lambda: f64,
    pub entropy_floor: f64,
    pub batch_mean_penalty: bool,
}

impl Default for IgSection {
    fn default() -> Self {
        IgSection {
            lambda: 5.0,
            entropy_floor: 1e-12,
            batch_mean_penalty: false,
        }
    }
}

/// `[train]`: loop control and mode.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// ig_bnn | svgd_only | plain_adv | invert_ig
    pub mode: String,
    /// constant | cosine
    pub schedule: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 10,
            batch_size: 64,
            seed: 42,
            eval_every: 0,
            mode: "ig_bnn".into(),
            schedule: "constant".into(),
        }
    }
}

/// `[eval]`: test-time attack strength and budget grids.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Test-time attack iterations (T').
    pub attack_steps: usize,
    /// Budget used by riskgap and per-epoch records; 0 falls back to the
    /// training eps_max.
    pub eps: f64,
    /// Budget grid for curves; empty selects the default grid
    /// 0..0.07 step 0.005 (exact multiples of 1/200).
    pub eps_list: Vec<f64>,
    /// Nested-ball curve evaluation (monotone by construction).
    pub nested: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            attack_steps: 20,
            eps: 0.0,
            eps_list: Vec::new(),
            nested: true,
        }
    }
}

/// The whole experiment file.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub network: NetworkSection,
    pub svgd: SvgdSection,
    pub attack: AttackSection,
    pub ig: IgSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        match self.data.kind.as_str() {
            "two_moons" | "gaussian_blobs" => {
                if self.data.count < 2 {
                    return fail(format!("data.count {} too small", self.data.count));
                }
            }
            "file" => {
                if self.data.path.is_empty() {
                    return fail("data.kind = \"file\" requires data.path".into());
                }
            }
            k => return fail(format!("unknown data.kind {k:?}")),
        }
        if !(0.0..=1.0).contains(&self.data.train_frac)
            || !(0.0..=1.0).contains(&self.data.val_frac)
            || self.data.train_frac + self.data.val_frac > 1.0
        {
            return fail("data split fractions must be in [0,1] and sum to at most 1".into());
        }
        if self.data.kind == "gaussian_blobs" && self.data.classes < 2 {
            return fail("gaussian_blobs needs at least 2 classes".into());
        }
        self.step_mode()?;
        self.norm()?;
        self.mode()?;
        self.schedule()?;
        let train_config = self.train_config_unchecked();
        train_config
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.eval.eps < 0.0 {
            return fail(format!("eval.eps must be >= 0, got {}", self.eval.eps));
        }
        if self.eval.eps_list.iter().any(|&e| e < 0.0) {
            return fail("eval.eps_list entries must be >= 0".into());
        }
        if self.eval.eps_list.windows(2).any(|w| w[0] > w[1]) {
            return fail("eval.eps_list must be ascending".into());
        }
        Ok(())
    }

    fn step_mode(&self) -> Result<StepMode> {
        match self.svgd.step_mode.as_str() {
            "constant" => Ok(StepMode::Constant),
            "adaptive" => Ok(StepMode::Adaptive),
            m => Err(ConfigError::Invalid(format!("unknown svgd.step_mode {m:?}"))),
        }
    }

    fn norm(&self) -> Result<Norm> {
        match self.attack.norm.as_str() {
            "linf" => Ok(Norm::LInf),
            "l2" => Ok(Norm::L2),
            n => Err(ConfigError::Invalid(format!("unknown attack.norm {n:?}"))),
        }
    }

    pub fn mode(&self) -> Result<TrainMode> {
        match self.train.mode.as_str() {
            "ig_bnn" => Ok(TrainMode::IgBnn),
            "svgd_only" => Ok(TrainMode::SvgdOnly),
            "plain_adv" => Ok(TrainMode::PlainAdv),
            "invert_ig" => Ok(TrainMode::InvertIg),
            m => Err(ConfigError::Invalid(format!("unknown train.mode {m:?}"))),
        }
    }

    fn schedule(&self) -> Result<StepSchedule> {
        match self.train.schedule.as_str() {
            "constant" => Ok(StepSchedule::Constant),
            "cosine" => Ok(StepSchedule::Cosine),
            s => Err(ConfigError::Invalid(format!("unknown train.schedule {s:?}"))),
        }
    }

    /// Normalized canonical form: every field explicit, stable ordering.
    pub fn echo(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Stable digest of the canonical form, for provenance records.
    pub fn digest(&self) -> u64 {
        seeds::fnv1a64(self.echo().as_bytes())
    }

    /// Training-time attack config.
    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            norm: self.norm().expect("validated"),
            eps_max: self.attack.eps_max,
            alpha: self.attack.alpha,
            steps: self.attack.steps,
            random_start: self.attack.random_start,
            input_bounds: Bounds {
                lo: self.attack.bounds_lo,
                hi: self.attack.bounds_hi,
            },
            query_budget: self.attack.query_budget,
        }
    }

    /// Test-time attack config (T' iterations, eval budget).
    pub fn eval_attack_config(&self) -> AttackConfig {
        AttackConfig {
            steps: self.eval.attack_steps,
            eps_max: self.eval_eps(),
            ..self.attack_config()
        }
    }

    /// The single evaluation budget: eval.eps, falling back to the training
    /// budget when unset.
    pub fn eval_eps(&self) -> f64 {
        if self.eval.eps > 0.0 {
            self.eval.eps
        } else {
            self.attack.eps_max
        }
    }

    /// Budget grid for curves: configured list, or 0..=0.07 step 0.005 as
    /// exact multiples of 1/200.
    pub fn eps_grid(&self) -> Vec<f64> {
        if self.eval.eps_list.is_empty() {
            (0..=14).map(|k| k as f64 / 200.0).collect()
        } else {
            self.eval.eps_list.clone()
        }
    }

    fn train_config_unchecked(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            hidden: self.network.hidden.clone(),
            particles: self.svgd.particles,
            svgd: SvgdConfig {
                gamma: self.svgd.gamma,
                step_size: self.svgd.step_size,
                step_mode: self.step_mode().unwrap_or(StepMode::Constant),
                bandwidth: if self.svgd.bandwidth > 0.0 {
                    Some(self.svgd.bandwidth)
                } else {
                    None
                },
            },
            attack: self.attack_config(),
            ig: IgConfig {
                lambda: self.ig.lambda,
                entropy_floor: self.ig.entropy_floor,
                batch_mean_penalty: self.ig.batch_mean_penalty,
            },
            seed: self.train.seed,
            eval_every: self.train.eval_every,
            eval_attack: self.eval_attack_config(),
            checkpoint_path: None,
            mode: self.mode().unwrap_or(TrainMode::IgBnn),
            schedule: self.schedule().unwrap_or(StepSchedule::Constant),
            prior_lambda: self.network.prior_lambda,
        }
    }

    /// The trainer-facing config (validated).
    pub fn train_config(&self) -> Result<TrainConfig> {
        self.validate()?;
        Ok(self.train_config_unchecked())
    }

    /// Generate or load the dataset and produce the deterministic
    /// train/val/test split.
    pub fn build_datasets(
        &self,
    ) -> std::result::Result<(LabeledDataset, LabeledDataset, LabeledDataset), crate::data::DataError>
    {
        let seed = seeds::derive(self.train.seed, "data", 0);
        let full = match self.data.kind.as_str() {
            "two_moons" => data::gen_two_moons(self.data.count, self.data.noise, seed)?,
            "gaussian_blobs" => {
                data::gen_gaussian_blobs(self.data.count, self.data.classes, self.data.spread, seed)?
            }
            "file" => {
                let path = PathBuf::from(&self.data.path);
                if path.extension().is_some_and(|e| e == "csv") {
                    data::import_csv(&path)?
                } else {
                    data::load_dataset(&path)?
                }
            }
            k => {
                return Err(crate::data::DataError::Invalid(format!(
                    "unknown data.kind {k:?}"
                )))
            }
        };
        data::split_dataset(
            &full,
            self.data.train_frac,
            self.data.val_frac,
            seeds::derive(self.train.seed, "split", 0),
        )
    }
}
