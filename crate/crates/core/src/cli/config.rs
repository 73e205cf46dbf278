//! Flat `key = value` run configuration.

use crate::ablation::Design;
use crate::metrics::EvalConfig;
use crate::model::{AcForm, ModelConfig, Placement};
use crate::train::TrainConfig;
use crate::world::DatasetConfig;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {msg}")]
    Invalid { key: String, msg: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
}

impl ConfigError {
    fn invalid(key: &str, msg: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.to_string(),
            msg: msg.into(),
        }
    }
}

/// Every setting a command can read. Defaults, then the config file, then
/// command-line flags, each overriding the last.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub threads: usize,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub idm_hidden: Vec<usize>,
    pub fdm_hidden: Vec<usize>,
    pub proprio_hidden: Vec<usize>,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub n_tokens: usize,
    pub eval: EvalConfig,
    pub norm_traj_count: usize,
    pub transfer_count: usize,
    pub ablate_designs: Vec<Design>,
    pub ablate_seeds: Vec<u64>,
    explicit: BTreeSet<&'static str>,
}

/// Keys in the order they are written.
pub const KEYS: &[&str] = &[
    "seed",
    "out_dir",
    "threads",
    "envs",
    "traj_per_env",
    "steps",
    "image_size",
    "step_max",
    "step_min",
    "interior_bias",
    "train_steps",
    "batch_pairs",
    "batch_triples",
    "lr",
    "warmup_steps",
    "clip_norm",
    "lambda_ac",
    "beta_commit",
    "w_codebook",
    "w_proprio",
    "ac_form",
    "vq_placement",
    "ac_proprio",
    "eval_every",
    "dead_code_steps",
    "holdout",
    "explode_factor",
    "collapse_fraction",
    "final_window",
    "horizon",
    "n_buckets",
    "rotation_threshold",
    "idm_hidden",
    "fdm_hidden",
    "proprio_hidden",
    "codebook_size",
    "code_dim",
    "n_tokens",
    "n_instances",
    "cycle_m",
    "probe_per_class",
    "probe_iterations",
    "probe_lr",
    "probe_train_fraction",
    "norm_traj_count",
    "transfer_count",
    "ablate_designs",
    "ablate_seeds",
];

/// Keys describing the network; checked against a checkpoint when set.
pub const MODEL_KEYS: &[&str] = &[
    "idm_hidden",
    "fdm_hidden",
    "proprio_hidden",
    "codebook_size",
    "code_dim",
    "n_tokens",
];

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::for_image(32, 32);
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            threads: 0,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            idm_hidden: m.idm_hidden,
            fdm_hidden: m.fdm_hidden,
            proprio_hidden: m.proprio_hidden,
            codebook_size: m.codebook_size,
            code_dim: m.code_dim,
            n_tokens: m.n_tokens,
            eval: EvalConfig::default(),
            norm_traj_count: 3,
            transfer_count: 5,
            ablate_designs: Design::ALL.to_vec(),
            ablate_seeds: vec![0, 1, 2],
            explicit: BTreeSet::new(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| ConfigError::invalid(key, format!("{v:?}: {e}")))
}

fn positive(key: &str, v: &str) -> Result<usize, ConfigError> {
    match num::<usize>(key, v)? {
        0 => Err(ConfigError::invalid(key, "must be at least 1")),
        n => Ok(n),
    }
}

fn real(key: &str, v: &str) -> Result<f64, ConfigError> {
    let x: f64 = num(key, v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(ConfigError::invalid(key, "must be finite"))
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn flag(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::invalid(key, format!("{v:?} is not a boolean"))),
    }
}

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key_static = *KEYS
            .iter()
            .find(|k| **k == key)
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "seed" => self.seed = num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "threads" => self.threads = num(key, v)?,
            "envs" => self.dataset.world.env_count = positive(key, v)? as u32,
            "traj_per_env" => self.dataset.traj_per_env = positive(key, v)?,
            "steps" => {
                let n = num::<usize>(key, v)?;
                if n < 3 {
                    return Err(ConfigError::invalid(key, "trajectories need at least 3 steps"));
                }
                self.dataset.steps = n;
            }
            "image_size" => {
                let n = num::<usize>(key, v)?;
                if n < 16 {
                    return Err(ConfigError::invalid(key, "images must be at least 16 pixels"));
                }
                self.dataset.image_h = n;
                self.dataset.image_w = n;
            }
            "step_max" => self.dataset.world.step_max = real(key, v)? as f32,
            "step_min" => self.dataset.world.step_min = real(key, v)? as f32,
            "interior_bias" => {
                let p = real(key, v)?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(ConfigError::invalid(key, "must be a probability"));
                }
                self.dataset.world.interior_bias = p;
            }
            "train_steps" => t.steps = positive(key, v)?,
            "batch_pairs" => t.batch_pairs = positive(key, v)?,
            "batch_triples" => t.batch_triples = positive(key, v)?,
            "lr" => t.base_lr = real(key, v)?,
            "warmup_steps" => t.warmup_steps = num(key, v)?,
            "clip_norm" => t.clip_norm = real(key, v)?,
            "lambda_ac" => t.weights.lambda_ac = real(key, v)?,
            "beta_commit" => t.weights.beta_commit = real(key, v)?,
            "w_codebook" => t.weights.w_codebook = real(key, v)?,
            "w_proprio" => t.weights.w_proprio = real(key, v)?,
            "ac_form" => {
                t.ac_form = AcForm::parse(v)
                    .ok_or_else(|| ConfigError::invalid(key, format!("unknown form {v:?}")))?
            }
            "vq_placement" => {
                t.placement = Placement::parse(v)
                    .ok_or_else(|| ConfigError::invalid(key, format!("unknown placement {v:?}")))?
            }
            "ac_proprio" => t.ac_proprio = flag(key, v)?,
            "eval_every" => t.eval_every = num(key, v)?,
            "dead_code_steps" => t.dead_code_steps = num(key, v)?,
            "holdout" => t.holdout = real(key, v)?,
            "explode_factor" => t.stability.explode_factor = real(key, v)?,
            "collapse_fraction" => t.stability.collapse_fraction = real(key, v)?,
            "final_window" => t.stability.final_window = real(key, v)?,
            "horizon" => {
                t.sample.horizon = num(key, v)?;
                self.eval.spec.horizon = t.sample.horizon;
            }
            "n_buckets" => {
                t.sample.n_buckets = num(key, v)?;
                self.eval.spec.n_buckets = t.sample.n_buckets;
            }
            "rotation_threshold" => {
                t.sample.rotation_threshold = real(key, v)?;
                self.eval.spec.rotation_threshold = t.sample.rotation_threshold;
            }
            "idm_hidden" => self.idm_hidden = list(key, v)?,
            "fdm_hidden" => self.fdm_hidden = list(key, v)?,
            "proprio_hidden" => self.proprio_hidden = list(key, v)?,
            "codebook_size" => self.codebook_size = positive(key, v)?,
            "code_dim" => self.code_dim = positive(key, v)?,
            "n_tokens" => self.n_tokens = positive(key, v)?,
            "n_instances" => self.eval.n_instances = positive(key, v)?,
            "cycle_m" => {
                let m = num::<usize>(key, v)?;
                if m < 3 {
                    return Err(ConfigError::invalid(key, "cycles need at least 3 edges"));
                }
                self.eval.cycle_m = m;
            }
            "probe_per_class" => self.eval.probe.per_class = positive(key, v)?,
            "probe_iterations" => self.eval.probe.iterations = positive(key, v)?,
            "probe_lr" => self.eval.probe.learning_rate = real(key, v)?,
            "probe_train_fraction" => {
                let f = real(key, v)?;
                if !(f > 0.0 && f < 1.0) {
                    return Err(ConfigError::invalid(key, "must be in (0, 1)"));
                }
                self.eval.probe.train_fraction = f;
            }
            "norm_traj_count" => self.norm_traj_count = num(key, v)?,
            "transfer_count" => self.transfer_count = num(key, v)?,
            "ablate_designs" => {
                self.ablate_designs = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        Design::parse(s)
                            .ok_or_else(|| ConfigError::invalid(key, format!("unknown design {s:?}")))
                    })
                    .collect::<Result<_, _>>()?;
                if self.ablate_designs.is_empty() {
                    return Err(ConfigError::invalid(key, "needs at least one design"));
                }
            }
            "ablate_seeds" => {
                self.ablate_seeds = list(key, v)?;
                if self.ablate_seeds.is_empty() {
                    return Err(ConfigError::invalid(key, "needs at least one seed"));
                }
            }
            _ => unreachable!("key listed in KEYS"),
        }
        self.explicit.insert(key_static);
        Ok(())
    }

    /// Current value of `key` in the form `set` accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let d = &self.dataset;
        Some(match key {
            "seed" => self.seed.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "threads" => self.threads.to_string(),
            "envs" => d.world.env_count.to_string(),
            "traj_per_env" => d.traj_per_env.to_string(),
            "steps" => d.steps.to_string(),
            "image_size" => d.image_h.to_string(),
            "step_max" => d.world.step_max.to_string(),
            "step_min" => d.world.step_min.to_string(),
            "interior_bias" => d.world.interior_bias.to_string(),
            "train_steps" => t.steps.to_string(),
            "batch_pairs" => t.batch_pairs.to_string(),
            "batch_triples" => t.batch_triples.to_string(),
            "lr" => t.base_lr.to_string(),
            "warmup_steps" => t.warmup_steps.to_string(),
            "clip_norm" => t.clip_norm.to_string(),
            "lambda_ac" => t.weights.lambda_ac.to_string(),
            "beta_commit" => t.weights.beta_commit.to_string(),
            "w_codebook" => t.weights.w_codebook.to_string(),
            "w_proprio" => t.weights.w_proprio.to_string(),
            "ac_form" => t.ac_form.as_str().to_string(),
            "vq_placement" => t.placement.as_str().to_string(),
            "ac_proprio" => t.ac_proprio.to_string(),
            "eval_every" => t.eval_every.to_string(),
            "dead_code_steps" => t.dead_code_steps.to_string(),
            "holdout" => t.holdout.to_string(),
            "explode_factor" => t.stability.explode_factor.to_string(),
            "collapse_fraction" => t.stability.collapse_fraction.to_string(),
            "final_window" => t.stability.final_window.to_string(),
            "horizon" => t.sample.horizon.to_string(),
            "n_buckets" => t.sample.n_buckets.to_string(),
            "rotation_threshold" => t.sample.rotation_threshold.to_string(),
            "idm_hidden" => join(&self.idm_hidden),
            "fdm_hidden" => join(&self.fdm_hidden),
            "proprio_hidden" => join(&self.proprio_hidden),
            "codebook_size" => self.codebook_size.to_string(),
            "code_dim" => self.code_dim.to_string(),
            "n_tokens" => self.n_tokens.to_string(),
            "n_instances" => self.eval.n_instances.to_string(),
            "cycle_m" => self.eval.cycle_m.to_string(),
            "probe_per_class" => self.eval.probe.per_class.to_string(),
            "probe_iterations" => self.eval.probe.iterations.to_string(),
            "probe_lr" => self.eval.probe.learning_rate.to_string(),
            "probe_train_fraction" => self.eval.probe.train_fraction.to_string(),
            "norm_traj_count" => self.norm_traj_count.to_string(),
            "transfer_count" => self.transfer_count.to_string(),
            "ablate_designs" => self
                .ablate_designs
                .iter()
                .map(|d| d.as_str())
                .collect::<Vec<_>>()
                .join(","),
            "ablate_seeds" => join(&self.ablate_seeds),
            _ => return None,
        })
    }

    /// Applies every line of a config file. Blank lines and `#` comments are
    /// ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: n + 1 })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// The fully resolved configuration, one key per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    /// Keys that took a value from a file or flag.
    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Cross-key checks that single settings cannot express.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.dataset.world.step_min > self.dataset.world.step_max || self.dataset.world.step_min < 0.0 {
            return Err(ConfigError::invalid("step_min", "must be in [0, step_max]"));
        }
        if self.dataset.world.step_max <= 0.0 {
            return Err(ConfigError::invalid("step_max", "must be positive"));
        }
        let train_err = |key: &str, e: crate::train::TrainError| ConfigError::invalid(key, e.to_string());
        if self.train.steps <= self.train.warmup_steps {
            return Err(ConfigError::invalid("warmup_steps", "must be below train_steps"));
        }
        if !(self.train.holdout > 0.0 && self.train.holdout < 1.0) {
            return Err(ConfigError::invalid("holdout", "must be in (0, 1)"));
        }
        if self.train.sample.horizon >= self.dataset.steps {
            return Err(ConfigError::invalid("horizon", "must be below steps"));
        }
        self.train.validate().map_err(|e| train_err("train", e))
    }

    /// Network geometry for frames of the configured size.
    pub fn model_config(&self, image_h: usize, image_w: usize) -> ModelConfig {
        ModelConfig {
            idm_hidden: self.idm_hidden.clone(),
            fdm_hidden: self.fdm_hidden.clone(),
            proprio_hidden: self.proprio_hidden.clone(),
            codebook_size: self.codebook_size,
            code_dim: self.code_dim,
            n_tokens: self.n_tokens,
            ..ModelConfig::for_image(image_h, image_w)
        }
    }

    /// Dataset settings with the run seed applied.
    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            seed: self.seed,
            ..self.dataset.clone()
        }
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Settings recorded in a checkpoint: everything except where outputs go
    /// and how many threads ran.
    pub fn snapshot(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = KEYS
            .iter()
            .filter(|k| !matches!(**k, "out_dir" | "threads"))
            .map(|k| (k.to_string(), self.get(k).expect("listed key").into()))
            .collect();
        serde_json::json!({ "run": map })
    }
}
