//! Run configuration: a flat `key = value` text file with `#` comments.
//!
//! Keys are grouped as `model.*`, `train.*`, `exit.*`, `data.*` and
//! `output.*`. Values given later override earlier ones, so applying the
//! file and then command-line overrides yields override > file > default.

use std::fs;
use std::path::Path;

use crate::data::Task;
use crate::error::{ConfigError, Result};
use crate::evalbench::TimeWeighting;
use crate::exitpolicy::{ExitPolicyConfig, PolicyKind};
use crate::model::ModelConfig;
use crate::training::{Optimizer, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub path: Option<String>,
    pub task: Task,
    pub count: usize,
    pub seed: u64,
    /// Examples used by `profile`.
    pub sample_count: usize,
    /// Examples scored for the final evaluation loss after training; 0 means all.
    pub eval_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            task: Task::Entail,
            count: 2000,
            seed: 0,
            sample_count: 100,
            eval_count: 200,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OutputConfig {
    pub checkpoint: Option<String>,
    pub loss_csv: Option<String>,
    pub bench_csv: Option<String>,
    pub profile_csv: Option<String>,
    /// Fill the wall-clock column; off by default so outputs are reproducible.
    pub wall_clock: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub exit: ExitPolicyConfig,
    /// Step budget for the decay schedule; follows `model.max_gen_len` unless set.
    pub exit_total_steps: Option<usize>,
    pub theta_grid: Vec<f64>,
    pub time_weighting: TimeWeighting,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            exit: ExitPolicyConfig::default(),
            exit_total_steps: None,
            theta_grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            time_weighting: TimeWeighting::Pair,
            data: DataConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "model.n_enc_layers",
    "model.n_dec_layers",
    "model.d_model",
    "model.n_heads",
    "model.d_ff",
    "model.vocab_size",
    "model.grid_side",
    "model.max_text_len",
    "model.max_gen_len",
    "model.rel_bucket_count",
    "model.tie_embeddings",
    "train.learning_rate",
    "train.steps",
    "train.batch_size",
    "train.seed",
    "train.layerwise_loss",
    "train.optimizer",
    "train.beta1",
    "train.beta2",
    "train.adam_eps",
    "train.weight_decay",
    "exit.kind",
    "exit.theta",
    "exit.beta",
    "exit.tau",
    "exit.total_steps",
    "exit.confidence_level",
    "exit.patience",
    "exit.theta_image",
    "exit.theta_text",
    "exit.fixed_image_exit",
    "exit.fixed_text_exit",
    "exit.record_signals",
    "exit.theta_grid",
    "exit.time_weighting",
    "data.path",
    "data.task",
    "data.count",
    "data.seed",
    "data.sample_count",
    "data.eval_count",
    "output.checkpoint",
    "output.loss_csv",
    "output.bench_csv",
    "output.profile_csv",
    "output.wall_clock",
];

fn bad(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn parse_usize(key: &str, v: &str) -> std::result::Result<usize, ConfigError> {
    v.parse().map_err(|_| bad(key, v, "expected a non-negative integer"))
}

fn parse_f64(key: &str, v: &str) -> std::result::Result<f64, ConfigError> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(bad(key, v, "expected a finite number")),
    }
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, v, "expected true or false")),
    }
}

fn parse_opt_usize(key: &str, v: &str) -> std::result::Result<Option<usize>, ConfigError> {
    if v == "none" {
        Ok(None)
    } else {
        parse_usize(key, v).map(Some)
    }
}

fn parse_opt_string(v: &str) -> Option<String> {
    (!v.is_empty()).then(|| v.to_string())
}

impl RunConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), ConfigError> {
        let m = &mut self.model;
        let t = &mut self.train;
        let e = &mut self.exit;
        match key {
            "model.n_enc_layers" => m.n_enc_layers = parse_usize(key, v)?,
            "model.n_dec_layers" => m.n_dec_layers = parse_usize(key, v)?,
            "model.d_model" => m.d_model = parse_usize(key, v)?,
            "model.n_heads" => m.n_heads = parse_usize(key, v)?,
            "model.d_ff" => m.d_ff = parse_usize(key, v)?,
            "model.vocab_size" => m.vocab_size = parse_usize(key, v)?,
            "model.grid_side" => m.grid_side = parse_usize(key, v)?,
            "model.max_text_len" => m.max_text_len = parse_usize(key, v)?,
            "model.max_gen_len" => m.max_gen_len = parse_usize(key, v)?,
            "model.rel_bucket_count" => m.rel_bucket_count = parse_usize(key, v)?,
            "model.tie_embeddings" => m.tie_embeddings = parse_bool(key, v)?,
            "train.learning_rate" => t.learning_rate = parse_f64(key, v)?,
            "train.steps" => t.steps = parse_usize(key, v)?,
            "train.batch_size" => t.batch_size = parse_usize(key, v)?,
            "train.seed" => t.seed = v.parse().map_err(|_| bad(key, v, "expected an unsigned integer"))?,
            "train.layerwise_loss" => t.layerwise_loss = parse_bool(key, v)?,
            "train.optimizer" => {
                t.optimizer = match v {
                    "adam" => Optimizer::Adam,
                    "sgd" => Optimizer::Sgd,
                    _ => return Err(bad(key, v, "expected adam or sgd")),
                }
            }
            "train.beta1" => t.beta1 = parse_f64(key, v)?,
            "train.beta2" => t.beta2 = parse_f64(key, v)?,
            "train.adam_eps" => t.adam_eps = parse_f64(key, v)?,
            "train.weight_decay" => t.weight_decay = parse_f64(key, v)?,
            "exit.kind" => {
                e.kind = PolicyKind::parse(v)
                    .ok_or_else(|| bad(key, v, "expected never, static, decay, confidence or patience"))?
            }
            "exit.theta" => e.theta = parse_f64(key, v)?,
            "exit.beta" => e.beta = parse_f64(key, v)?,
            "exit.tau" => e.tau = parse_f64(key, v)?,
            "exit.total_steps" => self.exit_total_steps = parse_opt_usize(key, v)?,
            "exit.confidence_level" => e.confidence_level = parse_f64(key, v)?,
            "exit.patience" => e.patience = parse_usize(key, v)?,
            "exit.theta_image" => e.theta_image = parse_f64(key, v)?,
            "exit.theta_text" => e.theta_text = parse_f64(key, v)?,
            "exit.fixed_image_exit" => e.fixed_image_exit = parse_opt_usize(key, v)?,
            "exit.fixed_text_exit" => e.fixed_text_exit = parse_opt_usize(key, v)?,
            "exit.record_signals" => e.record_signals = parse_bool(key, v)?,
            "exit.theta_grid" => {
                let grid = v
                    .split(',')
                    .map(|x| parse_f64(key, x.trim()))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                if grid.is_empty() {
                    return Err(bad(key, v, "grid is empty"));
                }
                self.theta_grid = grid;
            }
            "exit.time_weighting" => {
                self.time_weighting = match v {
                    "pair" => TimeWeighting::Pair,
                    "tokens" => TimeWeighting::Tokens,
                    _ => return Err(bad(key, v, "expected pair or tokens")),
                }
            }
            "data.path" => self.data.path = parse_opt_string(v),
            "data.task" => self.data.task = Task::parse(v).ok_or_else(|| bad(key, v, "expected entail or caption"))?,
            "data.count" => self.data.count = parse_usize(key, v)?,
            "data.seed" => self.data.seed = v.parse().map_err(|_| bad(key, v, "expected an unsigned integer"))?,
            "data.sample_count" => self.data.sample_count = parse_usize(key, v)?,
            "data.eval_count" => self.data.eval_count = parse_usize(key, v)?,
            "output.checkpoint" => self.output.checkpoint = parse_opt_string(v),
            "output.loss_csv" => self.output.loss_csv = parse_opt_string(v),
            "output.bench_csv" => self.output.bench_csv = parse_opt_string(v),
            "output.profile_csv" => self.output.profile_csv = parse_opt_string(v),
            "output.wall_clock" => self.output.wall_clock = parse_bool(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> std::result::Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            self.set(key, value.trim())?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> std::result::Result<(), ConfigError> {
        let (key, value) = pair.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: pair.to_string(),
        })?;
        self.set(key.trim(), value.trim())
    }

    pub fn parse(text: &str) -> std::result::Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Defaults, then the file (if any), then overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            cfg.apply_text(&fs::read_to_string(p)?)?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        Ok(cfg)
    }

    /// Exit policy with the step budget resolved against the model.
    pub fn exit_policy(&self) -> ExitPolicyConfig {
        ExitPolicyConfig {
            total_steps: self.exit_total_steps.unwrap_or(self.model.max_gen_len),
            ..self.exit.clone()
        }
    }

    /// Value of an optional key that the current command needs.
    pub fn require<'a>(&self, key: &str, value: &'a Option<String>) -> std::result::Result<&'a str, ConfigError> {
        value.as_deref().ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }
}
