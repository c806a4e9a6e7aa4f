//! Experiment configuration: a flat key=value text format, every key
//! overridable from the command line.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::objective::LossWeights;
use crate::rlcl::LambdaConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Vanilla,
    Rlcl,
    Cfcl,
    Ctrcl,
    Dml,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "rlcl" => Ok(Self::Rlcl),
            "cfcl" => Ok(Self::Cfcl),
            "ctrcl" => Ok(Self::Ctrcl),
            "dml" => Ok(Self::Dml),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected vanilla|rlcl|cfcl|ctrcl|dml)"
            ))),
        }
    }

    pub const fn name(&self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::Rlcl => "rlcl",
            Self::Cfcl => "cfcl",
            Self::Ctrcl => "ctrcl",
            Self::Dml => "dml",
        }
    }

    /// Whether the logit-space transfer term is active (dml uses it with
    /// rectification disabled).
    pub fn logit_term(&self) -> bool {
        matches!(self, Self::Rlcl | Self::Ctrcl | Self::Dml)
    }

    /// Whether the feature-space transfer terms are active.
    pub fn feature_terms(&self) -> bool {
        matches!(self, Self::Cfcl | Self::Ctrcl)
    }
}

/// Synthetic-data generation parameters used when no dataset paths are set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenParams {
    pub num_train: usize,
    pub num_test: usize,
    pub size: usize,
    pub classes: usize,
    pub data_seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self { num_train: 200, num_test: 50, size: 64, classes: 4, data_seed: 7 }
    }
}

/// Full experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub gen: GenParams,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub lambda: LambdaConfig,
    pub cnn_width: usize,
    pub cnn_depth: usize,
    pub tr_width: usize,
    pub tr_depth: usize,
    pub heads: usize,
    pub eval_every: usize,
    pub out_dir: Option<PathBuf>,
    pub dump_diag: bool,
    /// Train only this many epochs while keeping the LR schedule pinned to
    /// `epochs`; used for checkpoint-resume tests. Not serialized.
    pub stop_after: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Ctrcl,
            train_data: None,
            test_data: None,
            gen: GenParams::default(),
            epochs: 60,
            batch_size: 8,
            base_lr: 3e-4,
            seed: 0,
            weights: LossWeights::default(),
            lambda: LambdaConfig::Full,
            cnn_width: 16,
            cnn_depth: 3,
            tr_width: 32,
            tr_depth: 2,
            heads: 2,
            eval_every: 0,
            out_dir: None,
            dump_diag: false,
            stop_after: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        self.weights.validate()?;
        if let Some(stop) = self.stop_after {
            if stop == 0 || stop > self.epochs {
                return Err(Error::Config("stop_after must be in [1, epochs]".into()));
            }
        }
        Ok(())
    }

    /// Deterministic flat text form; parse with [`RunConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("mode", self.mode.name().into());
        kv(
            "train_data",
            self.train_data.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv(
            "test_data",
            self.test_data.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv("gen_train", self.gen.num_train.to_string());
        kv("gen_test", self.gen.num_test.to_string());
        kv("size", self.gen.size.to_string());
        kv("classes", self.gen.classes.to_string());
        kv("data_seed", self.gen.data_seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("base_lr", format!("{:e}", self.base_lr));
        kv("seed", self.seed.to_string());
        kv("beta", self.weights.beta.to_string());
        kv("gamma1", self.weights.gamma1.to_string());
        kv("gamma2", self.weights.gamma2.to_string());
        kv("lambda", self.lambda.name().into());
        kv("cnn_width", self.cnn_width.to_string());
        kv("cnn_depth", self.cnn_depth.to_string());
        kv("tr_width", self.tr_width.to_string());
        kv("tr_depth", self.tr_depth.to_string());
        kv("heads", self.heads.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv(
            "out",
            self.out_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv("dump_diag", self.dump_diag.to_string());
        s
    }

    /// Parses `key=value` lines; `#` starts a comment, blank lines are
    /// skipped, unknown keys rejected. Starts from defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{raw}`", lineno + 1))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Applies one key=value override.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value for {key}: `{v}`")))
        }
        match key {
            "mode" => self.mode = Mode::parse(value)?,
            "train_data" => {
                self.train_data = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            "test_data" => {
                self.test_data = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            "gen_train" => self.gen.num_train = num(key, value)?,
            "gen_test" => self.gen.num_test = num(key, value)?,
            "size" => self.gen.size = num(key, value)?,
            "classes" => self.gen.classes = num(key, value)?,
            "data_seed" => self.gen.data_seed = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "beta" => self.weights.beta = num(key, value)?,
            "gamma1" => self.weights.gamma1 = num(key, value)?,
            "gamma2" => self.weights.gamma2 = num(key, value)?,
            "lambda" => self.lambda = LambdaConfig::parse(value)?,
            "cnn_width" => self.cnn_width = num(key, value)?,
            "cnn_depth" => self.cnn_depth = num(key, value)?,
            "tr_width" => self.tr_width = num(key, value)?,
            "tr_depth" => self.tr_depth = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "out" => self.out_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "dump_diag" => self.dump_diag = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }
}
