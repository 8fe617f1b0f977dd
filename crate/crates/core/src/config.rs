//! Flat `key = value` configuration shared by the trainer, checkpoints and
//! the command line. Blank lines and `#` comments are ignored.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::model::Mode;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(format!("unknown optimizer {other:?} (expected sgd or adam)")),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub vocab_size: usize,
    /// Word embedding size; equals `hidden` so that `w · c` needs no projection.
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    /// Noise samples per positive token.
    pub k: usize,
    pub init_scale: f64,
    pub forget_bias: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.embed_dim != self.hidden {
            return bad(format!(
                "embed_dim ({}) must equal hidden ({})",
                self.embed_dim, self.hidden
            ));
        }
        if self.hidden == 0 || self.layers == 0 {
            return bad("hidden and layers must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr0: f64,
    /// Learning rate is divided by this once per epoch after `decay_start_epoch`.
    pub decay_factor: f64,
    pub decay_start_epoch: usize,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub bptt_len: usize,
    pub seed: u64,
    pub noise_exponent: f64,
    /// One noise set per step instead of per token.
    pub share_noise: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub threads: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(self.decay_factor > 0.0) {
            return bad(format!("decay_factor must be positive, got {}", self.decay_factor));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.bptt_len == 0 {
            return bad("epochs, batch_size and bptt_len must be positive".into());
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub max_vocab: usize,
    pub min_count: u64,
}

impl Default for Config {
    /// The PTB recipe.
    fn default() -> Self {
        Config {
            model: ModelConfig {
                mode: Mode::Pmi,
                vocab_size: 10_000,
                embed_dim: 300,
                hidden: 300,
                layers: 2,
                dropout: 0.5,
                k: 100,
                init_scale: 0.05,
                forget_bias: 1.0,
            },
            train: TrainConfig {
                optimizer: Optimizer::Sgd,
                lr0: 1.0,
                decay_factor: 1.2,
                decay_start_epoch: 6,
                clip_norm: 5.0,
                epochs: 39,
                batch_size: 20,
                bptt_len: 20,
                seed: 1,
                noise_exponent: 1.0,
                share_noise: false,
                adam_beta1: 0.9,
                adam_beta2: 0.999,
                adam_eps: 1e-8,
                threads: 1,
            },
            max_vocab: 10_000,
            min_count: 1,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("bad value {value:?} for {key}: {e}"))
}

impl Config {
    pub const KEYS: &'static [&'static str] = &[
        "mode",
        "vocab_size",
        "embed_dim",
        "hidden",
        "layers",
        "dropout",
        "k",
        "init_scale",
        "forget_bias",
        "optimizer",
        "lr",
        "decay_factor",
        "decay_start_epoch",
        "clip_norm",
        "epochs",
        "batch_size",
        "bptt_len",
        "seed",
        "rng",
        "noise_exponent",
        "share_noise",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "threads",
        "max_vocab",
        "min_count",
    ];

    /// Parses a config file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: n + 1,
                message: format!("expected key = value, got {raw:?}"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config { message, .. } => Error::Config {
                    line: n + 1,
                    message,
                },
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key. Used for file parsing and for command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let r: std::result::Result<(), String> = (|| {
            match key {
                "mode" => m.mode = parse_value(key, value)?,
                "vocab_size" => m.vocab_size = parse_value(key, value)?,
                "embed_dim" => m.embed_dim = parse_value(key, value)?,
                "hidden" => m.hidden = parse_value(key, value)?,
                "layers" => m.layers = parse_value(key, value)?,
                "dropout" => m.dropout = parse_value(key, value)?,
                "k" => m.k = parse_value(key, value)?,
                "init_scale" => m.init_scale = parse_value(key, value)?,
                "forget_bias" => m.forget_bias = parse_value(key, value)?,
                "optimizer" => t.optimizer = parse_value(key, value)?,
                "lr" => t.lr0 = parse_value(key, value)?,
                "decay_factor" => t.decay_factor = parse_value(key, value)?,
                "decay_start_epoch" => t.decay_start_epoch = parse_value(key, value)?,
                "clip_norm" => t.clip_norm = parse_value(key, value)?,
                "epochs" => t.epochs = parse_value(key, value)?,
                "batch_size" => t.batch_size = parse_value(key, value)?,
                "bptt_len" => t.bptt_len = parse_value(key, value)?,
                "seed" => t.seed = parse_value(key, value)?,
                "rng" => {
                    if !value.eq_ignore_ascii_case("chacha8") {
                        return Err(format!("unsupported rng {value:?} (only chacha8)"));
                    }
                }
                "noise_exponent" => t.noise_exponent = parse_value(key, value)?,
                "share_noise" => t.share_noise = parse_value(key, value)?,
                "adam_beta1" => t.adam_beta1 = parse_value(key, value)?,
                "adam_beta2" => t.adam_beta2 = parse_value(key, value)?,
                "adam_eps" => t.adam_eps = parse_value(key, value)?,
                "threads" => t.threads = parse_value(key, value)?,
                "max_vocab" => self.max_vocab = parse_value(key, value)?,
                "min_count" => self.min_count = parse_value(key, value)?,
                other => return Err(format!("unknown key {other:?}")),
            }
            Ok(())
        })();
        r.map_err(|message| Error::Config { line: 0, message })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Serializes every key; `parse` of the output reproduces `self`.
    pub fn to_kv_string(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: &dyn fmt::Display| writeln!(s, "{k} = {v}").unwrap();
        put("mode", &m.mode);
        put("vocab_size", &m.vocab_size);
        put("embed_dim", &m.embed_dim);
        put("hidden", &m.hidden);
        put("layers", &m.layers);
        put("dropout", &m.dropout);
        put("k", &m.k);
        put("init_scale", &m.init_scale);
        put("forget_bias", &m.forget_bias);
        put("optimizer", &t.optimizer);
        put("lr", &t.lr0);
        put("decay_factor", &t.decay_factor);
        put("decay_start_epoch", &t.decay_start_epoch);
        put("clip_norm", &t.clip_norm);
        put("epochs", &t.epochs);
        put("batch_size", &t.batch_size);
        put("bptt_len", &t.bptt_len);
        put("seed", &t.seed);
        put("rng", &"chacha8");
        put("noise_exponent", &t.noise_exponent);
        put("share_noise", &t.share_noise);
        put("adam_beta1", &t.adam_beta1);
        put("adam_beta2", &t.adam_beta2);
        put("adam_eps", &t.adam_eps);
        put("threads", &t.threads);
        put("max_vocab", &self.max_vocab);
        put("min_count", &self.min_count);
        s
    }
}
