//! Experiment specifications as TOML.
//!
//! Hyperparameter keys mirror the row names of the reference
//! hyperparameter tables, kebab-cased.

use std::path::{Path, PathBuf};

use dvisr_core::bayes::{LikelihoodModel, PriorMode, PriorModel};
use dvisr_core::expr::{ConstantPosition, ConstraintSet, Dataset, TokenLibrary};
use dvisr_core::nn::{PlateauConfig, RmsPropConfig};
use dvisr_core::quadrature::QuadratureScheme;
use dvisr_core::trainer::{BaselineKind, Problem, TrainConfig};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] dvisr_core::Error),
}

/// Noise-free targets on the 11-point grid `x_0 = 0.0, 0.1, ..., 1.0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataGenerator {
    #[serde(rename = "y=x_0^2")]
    Quadratic,
    #[serde(rename = "y=x_0")]
    Linear,
    #[serde(rename = "y=0.5")]
    Constant,
}

impl DataGenerator {
    pub fn grid() -> Vec<f64> {
        (0..=10).map(|i| i as f64 / 10.0).collect()
    }

    pub fn dataset(self) -> Dataset {
        let f: fn(f64) -> f64 = match self {
            DataGenerator::Quadratic => |x| x * x,
            DataGenerator::Linear => |x| x,
            DataGenerator::Constant => |_| 0.5,
        };
        Dataset::univariate(&Self::grid(), f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Hyperparameters {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub runs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_number_of_tokens_per_expression: Option<usize>,
    pub rnn_type: String,
    pub number_of_hidden_layers: usize,
    pub hidden_layer_size: usize,
    pub optimiser: String,
    pub rmsprop_learning_rate: f64,
    pub rmsprop_alpha: f64,
    pub rmsprop_epsilon: f64,
    pub learning_rate_annealer: String,
    pub lra_metric: String,
    pub lra_mode: String,
    pub lra_factor: f64,
    pub lra_patience: usize,
    pub lra_min_lr: f64,
    pub baseline: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_ewma_alpha: Option<f64>,
    pub likelihood_standard_deviation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_prior_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_prior_standard_deviation: Option<f64>,
}

pub const GRU: &str = "Gated Recurrent Unit";
pub const RMSPROP: &str = "RMSprop";
pub const PLATEAU: &str = "ReduceLROnPlateau";
pub const EWMA: &str = "Exponential weighted moving average";
pub const MEAN: &str = "Mean";

impl Hyperparameters {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fixed = [
            ("rnn-type", self.rnn_type.as_str(), GRU),
            ("optimiser", &self.optimiser, RMSPROP),
            ("learning-rate-annealer", &self.learning_rate_annealer, PLATEAU),
            ("lra-metric", &self.lra_metric, "-ELBO"),
            ("lra-mode", &self.lra_mode, "min"),
        ];
        for (key, got, want) in fixed {
            if got != want {
                return Err(ConfigError::Invalid(format!("{key} = {got:?} is not supported (only {want:?})")));
            }
        }
        if self.number_of_hidden_layers != 1 {
            return Err(ConfigError::Invalid("only a single hidden layer is supported".into()));
        }
        if self.runs == 0 || self.epochs == 0 {
            return Err(ConfigError::Invalid("runs and epochs must be positive".into()));
        }
        self.baseline_kind()?;
        self.prior_mode()?;
        Ok(())
    }

    pub fn baseline_kind(&self) -> Result<BaselineKind, ConfigError> {
        match (self.baseline.as_str(), self.baseline_ewma_alpha) {
            (EWMA, Some(alpha)) => Ok(BaselineKind::Ewma { alpha }),
            (EWMA, None) => Err(ConfigError::Invalid("EWMA baseline needs baseline-ewma-alpha".into())),
            (MEAN, None) => Ok(BaselineKind::BatchMean),
            (MEAN, Some(_)) => Err(ConfigError::Invalid("baseline-ewma-alpha given for a mean baseline".into())),
            (other, _) => Err(ConfigError::Invalid(format!("unknown baseline {other:?}"))),
        }
    }

    pub fn prior_mode(&self) -> Result<PriorMode, ConfigError> {
        match (self.c_prior_mean, self.c_prior_standard_deviation) {
            (None, None) => Ok(PriorMode::UniformOverTrees),
            (Some(mu), Some(sigma)) => Ok(PriorMode::UniformTreesWithNormalConstants { mu, sigma }),
            _ => Err(ConfigError::Invalid("c-prior-mean and c-prior-standard-deviation go together".into())),
        }
    }

    /// Rows in the order and naming of the reference hyperparameter tables.
    pub fn table_rows(&self) -> Vec<(&'static str, toml::Value)> {
        use toml::Value::{Float, Integer, String as Str};
        let mut rows = vec![
            ("Epochs", Integer(self.epochs as i64)),
            ("Samples per epoch", Integer(self.samples_per_epoch as i64)),
            ("Runs", Integer(self.runs as i64)),
        ];
        if let Some(m) = self.max_number_of_tokens_per_expression {
            rows.push(("Max number of tokens per expression", Integer(m as i64)));
        }
        rows.extend([
            ("RNN type", Str(self.rnn_type.clone())),
            ("Number of hidden layers", Integer(self.number_of_hidden_layers as i64)),
            ("Hidden layer size", Integer(self.hidden_layer_size as i64)),
            ("Optimiser", Str(self.optimiser.clone())),
            ("RMSprop learning rate", Float(self.rmsprop_learning_rate)),
            ("RMSprop alpha", Float(self.rmsprop_alpha)),
            ("RMSprop epsilon", Float(self.rmsprop_epsilon)),
            ("Learning rate annealer (LRA)", Str(self.learning_rate_annealer.clone())),
            ("LRA metric", Str(self.lra_metric.clone())),
            ("LRA mode", Str(self.lra_mode.clone())),
            ("LRA factor", Float(self.lra_factor)),
            ("LRA patience", Integer(self.lra_patience as i64)),
            ("LRA min_lr", Float(self.lra_min_lr)),
            ("Baseline", Str(self.baseline.clone())),
        ]);
        if let Some(a) = self.baseline_ewma_alpha {
            rows.push(("Baseline (EWMA) alpha", Float(a)));
        }
        rows.push(("Likelihood standard deviation", Float(self.likelihood_standard_deviation)));
        if let Some(m) = self.c_prior_mean {
            rows.push(("c prior mean", Float(m)));
        }
        if let Some(s) = self.c_prior_standard_deviation {
            rows.push(("c prior standard deviation", Float(s)));
        }
        rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ConstraintFlags {
    #[serde(default)]
    pub forbid_inverse_child: bool,
    #[serde(default)]
    pub forbid_nested_trig: bool,
    #[serde(default)]
    pub forbid_all_constant_children: bool,
    #[serde(default)]
    pub constant_child_position: ConstantPosition,
}

impl ConstraintFlags {
    pub fn with_max_tokens(&self, max_tokens: usize) -> ConstraintSet {
        ConstraintSet {
            max_tokens,
            forbid_inverse_child: self.forbid_inverse_child,
            forbid_nested_trig: self.forbid_nested_trig,
            forbid_all_constant_children: self.forbid_all_constant_children,
            constant_child_position: self.constant_child_position,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct OracleSettings {
    pub quadrature: QuadratureScheme,
    /// Fresh samples used for the Monte Carlo ELBO behind reported KLs when
    /// the variational distribution cannot be enumerated.
    pub elbo_samples: usize,
    /// Tolerance on `|q - p|` for the stored table comparison.
    pub compare_tol: f64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings { quadrature: QuadratureScheme::default(), elbo_samples: 50_000, compare_tol: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ScalingSettings {
    pub max_sizes: Vec<usize>,
    /// Sizes whose constrained tree count exceeds this are skipped.
    pub tree_budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub data: DataGenerator,
    pub library: Vec<String>,
    pub seed: u64,
    #[serde(default)]
    pub init_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub constraints: ConstraintFlags,
    pub hyperparameters: Hyperparameters,
    #[serde(default)]
    pub oracle: OracleSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingSettings>,
}

impl ExperimentSpec {
    pub fn from_toml_str(s: &str, origin: &Path) -> Result<Self, ConfigError> {
        let spec: ExperimentSpec =
            toml::from_str(s).map_err(|source| ConfigError::Parse { path: origin.to_path_buf(), source })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&s, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("specs always serialize")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.hyperparameters.validate()?;
        self.library()?;
        if self.hyperparameters.max_number_of_tokens_per_expression.is_none() && self.scaling.is_none() {
            return Err(ConfigError::Invalid("max-number-of-tokens-per-expression is required outside scaling sweeps".into()));
        }
        if let Some(s) = &self.scaling {
            if s.max_sizes.is_empty() || s.max_sizes.contains(&0) {
                return Err(ConfigError::Invalid("scaling max-sizes must be non-empty and positive".into()));
            }
        }
        self.train_config(self.seed).validate()?;
        Ok(())
    }

    pub fn library(&self) -> Result<TokenLibrary, ConfigError> {
        Ok(TokenLibrary::from_symbols(&self.library)?)
    }

    pub fn max_tokens(&self) -> Result<usize, ConfigError> {
        self.hyperparameters
            .max_number_of_tokens_per_expression
            .ok_or_else(|| ConfigError::Invalid("no max-number-of-tokens-per-expression".into()))
    }

    /// Inference problem at a given size bound.
    pub fn problem_at(&self, max_tokens: usize) -> Result<Problem, ConfigError> {
        let lib = self.library()?;
        let cs = self.constraints.with_max_tokens(max_tokens);
        cs.validate()?;
        let lm = LikelihoodModel::new(self.hyperparameters.likelihood_standard_deviation)?;
        let pm = PriorModel::for_library(&lib, max_tokens, self.hyperparameters.prior_mode()?)?;
        Ok(Problem { lib, cs, data: self.data.dataset(), lm, pm })
    }

    pub fn problem(&self) -> Result<Problem, ConfigError> {
        self.problem_at(self.max_tokens()?)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let h = &self.hyperparameters;
        TrainConfig {
            epochs: h.epochs,
            batch_size: h.samples_per_epoch,
            baseline: h.baseline_kind().unwrap_or(BaselineKind::BatchMean),
            seed,
            hidden: h.hidden_layer_size,
            init_scale: self.init_scale.unwrap_or(TrainConfig::default().init_scale),
            optimizer: RmsPropConfig { lr: h.rmsprop_learning_rate, alpha: h.rmsprop_alpha, eps: h.rmsprop_epsilon },
            scheduler: PlateauConfig {
                factor: h.lra_factor,
                patience: h.lra_patience,
                min_lr: h.lra_min_lr,
                ..PlateauConfig::default()
            },
            grad_clip: None,
        }
    }

    /// Seed of run `index`, derived from the master seed.
    pub fn run_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, index as u64)
    }
}

pub fn derive_seed(master: u64, index: u64) -> u64 {
    dvisr_core::policy::stream_rng(master, 0x5eed_0000_0000_0000, index).next_u64()
}
