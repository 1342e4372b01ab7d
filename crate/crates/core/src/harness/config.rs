//! Flat `key=value` run configuration with dotted keys.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::atv::DEFAULT_LAMBDA;
use crate::baselines::LoraConfig;
use crate::error::{Error, Result};
use crate::tasks::{SplitSizes, Vocab};
use crate::transformer::{ModelConfig, PositionPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    ZeroShot,
    Icl,
    Ftv,
    Lora,
    Prefix,
    Atv,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::ZeroShot,
        Method::Icl,
        Method::Ftv,
        Method::Lora,
        Method::Prefix,
        Method::Atv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::ZeroShot => "zero_shot",
            Method::Icl => "icl",
            Method::Ftv => "ftv",
            Method::Lora => "lora",
            Method::Prefix => "prefix",
            Method::Atv => "atv",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerMask {
    All,
    BottomThird,
    MiddleThird,
    TopThird,
    None,
    Explicit(Vec<usize>),
}

impl LayerMask {
    /// Thirds split `L` layers as evenly as possible, bottom first.
    pub fn resolve(&self, n_layers: usize) -> Result<BTreeSet<usize>> {
        let third = |i: usize| (i * n_layers / 3)..((i + 1) * n_layers / 3);
        Ok(match self {
            LayerMask::All => (0..n_layers).collect(),
            LayerMask::BottomThird => third(0).collect(),
            LayerMask::MiddleThird => third(1).collect(),
            LayerMask::TopThird => third(2).collect(),
            LayerMask::None => BTreeSet::new(),
            LayerMask::Explicit(v) => {
                if let Some(&l) = v.iter().find(|&&l| l >= n_layers) {
                    return Err(Error::config("atv.layers", format!("layer {l} outside 0..{n_layers}")));
                }
                v.iter().copied().collect()
            }
        })
    }
}

impl fmt::Display for LayerMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerMask::All => f.write_str("all"),
            LayerMask::BottomThird => f.write_str("bottom_third"),
            LayerMask::MiddleThird => f.write_str("middle_third"),
            LayerMask::TopThird => f.write_str("top_third"),
            LayerMask::None => f.write_str("none"),
            LayerMask::Explicit(v) => {
                let parts: Vec<String> = v.iter().map(usize::to_string).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for LayerMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => LayerMask::All,
            "bottom_third" => LayerMask::BottomThird,
            "middle_third" => LayerMask::MiddleThird,
            "top_third" => LayerMask::TopThird,
            "none" => LayerMask::None,
            _ => LayerMask::Explicit(parse_list(s, "atv.layers")?),
        })
    }
}

fn parse_list<T: FromStr>(s: &str, field: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| Error::config(field, format!("cannot parse {p:?}"))))
        .collect()
}

fn policy_name(p: PositionPolicy) -> &'static str {
    match p {
        PositionPolicy::PromptFinalOnly => "prompt_final_only",
        PositionPolicy::CurrentLastEachStep => "current_last_each_step",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub large: ModelConfig,
    pub generator: ModelConfig,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub lambda: f64,
    pub layers: LayerMask,
    pub policy: PositionPolicy,
    pub ftv_lambda: f64,
    pub ftv_k: usize,
    pub icl_k: usize,
    pub lora: LoraConfig,
    pub lora_lr: f64,
    pub prefix_len: usize,
    pub prefix_lr: f64,
    pub data_seed: u64,
    pub sizes: SplitSizes,
    pub ladder: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let vocab_size = Vocab::build().len();
        Self {
            method: Method::Atv,
            seeds: vec![42, 100, 10],
            out_dir: PathBuf::from("runs"),
            large: ModelConfig {
                n_layers: 6,
                d_model: 64,
                n_heads: 4,
                ffn_dim: 256,
                vocab_size,
                max_seq_len: 256,
                tie_embeddings: true,
            },
            generator: ModelConfig {
                n_layers: 2,
                d_model: 32,
                n_heads: 2,
                ffn_dim: 128,
                vocab_size,
                max_seq_len: 64,
                tie_embeddings: true,
            },
            epochs: 15,
            lr: 5e-4,
            weight_decay: 1e-5,
            batch_size: 1,
            pretrain_epochs: 3,
            pretrain_lr: 1e-3,
            lambda: DEFAULT_LAMBDA,
            layers: LayerMask::All,
            policy: PositionPolicy::default(),
            ftv_lambda: DEFAULT_LAMBDA,
            ftv_k: 4,
            icl_k: 4,
            lora: LoraConfig::default(),
            lora_lr: 4e-4,
            prefix_len: 4,
            prefix_lr: 5e-4,
            data_seed: 42,
            sizes: SplitSizes::default(),
            ladder: vec![16, 32, 64, 128],
        }
    }
}

fn parse<T: FromStr>(field: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(field, format!("cannot parse {value:?}")))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::parse_text(&text)
    }

    /// Defaults overridden by each `key=value` line; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", lineno + 1), "expected key=value"))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "method" => self.method = v.parse()?,
            "seeds" => self.seeds = parse_list(v, key)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "large.n_layers" => self.large.n_layers = parse(key, v)?,
            "large.d_model" => self.large.d_model = parse(key, v)?,
            "large.n_heads" => self.large.n_heads = parse(key, v)?,
            "large.ffn_dim" => self.large.ffn_dim = parse(key, v)?,
            "large.max_seq_len" => self.large.max_seq_len = parse(key, v)?,
            "large.tie_embeddings" => self.large.tie_embeddings = parse(key, v)?,
            "generator.n_layers" => self.generator.n_layers = parse(key, v)?,
            "generator.d_model" => self.generator.d_model = parse(key, v)?,
            "generator.n_heads" => self.generator.n_heads = parse(key, v)?,
            "generator.ffn_dim" => self.generator.ffn_dim = parse(key, v)?,
            "generator.max_seq_len" => self.generator.max_seq_len = parse(key, v)?,
            "generator.tie_embeddings" => self.generator.tie_embeddings = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.weight_decay" => self.weight_decay = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "pretrain.epochs" => self.pretrain_epochs = parse(key, v)?,
            "pretrain.lr" => self.pretrain_lr = parse(key, v)?,
            "atv.lambda" => self.lambda = parse(key, v)?,
            "atv.layers" => self.layers = v.parse()?,
            "atv.position_policy" => {
                self.policy = match v {
                    "prompt_final_only" => PositionPolicy::PromptFinalOnly,
                    "current_last_each_step" => PositionPolicy::CurrentLastEachStep,
                    _ => return Err(Error::config(key, format!("unknown policy {v:?}"))),
                }
            }
            "ftv.lambda" => self.ftv_lambda = parse(key, v)?,
            "ftv.k" => self.ftv_k = parse(key, v)?,
            "icl.k" => self.icl_k = parse(key, v)?,
            "lora.rank" => self.lora.rank = parse(key, v)?,
            "lora.alpha" => self.lora.alpha = parse(key, v)?,
            "lora.dropout" => self.lora.dropout = parse(key, v)?,
            "lora.lr" => self.lora_lr = parse(key, v)?,
            "prefix.length" => self.prefix_len = parse(key, v)?,
            "prefix.lr" => self.prefix_lr = parse(key, v)?,
            "data.seed" => self.data_seed = parse(key, v)?,
            "data.train" => self.sizes.train = parse(key, v)?,
            "data.test" => self.sizes.test = parse(key, v)?,
            "capacity.ladder" => self.ladder = parse_list(v, key)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let prefixed = |name: &str, e: Error| match e {
            Error::Config { field, message } => Error::config(format!("{name}.{field}"), message),
            other => other,
        };
        self.large.validate().map_err(|e| prefixed("large", e))?;
        self.generator.validate().map_err(|e| prefixed("generator", e))?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        let positive = [
            ("train.epochs", self.epochs),
            ("train.batch_size", self.batch_size),
            ("data.train", self.sizes.train),
            ("data.test", self.sizes.test),
            ("lora.rank", self.lora.rank),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        let rates = [
            ("train.lr", self.lr),
            ("pretrain.lr", self.pretrain_lr),
            ("lora.lr", self.lora_lr),
            ("prefix.lr", self.prefix_lr),
        ];
        for (k, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(k, "must be positive and finite"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if !self.lambda.is_finite() || !self.ftv_lambda.is_finite() {
            return Err(Error::config("atv.lambda", "must be finite"));
        }
        if !(0.0..1.0).contains(&self.lora.dropout) {
            return Err(Error::config("lora.dropout", "must lie in [0, 1)"));
        }
        self.layers.resolve(self.large.n_layers)?;
        if self.ladder.is_empty() || self.ladder.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("capacity.ladder", "must be a strictly increasing list"));
        }
        if let Some(&d) = self.ladder.iter().find(|&&d| d % self.generator.n_heads != 0) {
            return Err(Error::config(
                "capacity.ladder",
                format!("rung {d} not divisible by generator.n_heads"),
            ));
        }
        Ok(())
    }

    /// Every key with its resolved value, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let ladder: Vec<String> = self.ladder.iter().map(usize::to_string).collect();
        let lines = [
            ("method", self.method.to_string()),
            ("seeds", seeds.join(",")),
            ("out_dir", self.out_dir.display().to_string()),
            ("large.n_layers", self.large.n_layers.to_string()),
            ("large.d_model", self.large.d_model.to_string()),
            ("large.n_heads", self.large.n_heads.to_string()),
            ("large.ffn_dim", self.large.ffn_dim.to_string()),
            ("large.max_seq_len", self.large.max_seq_len.to_string()),
            ("large.tie_embeddings", self.large.tie_embeddings.to_string()),
            ("generator.n_layers", self.generator.n_layers.to_string()),
            ("generator.d_model", self.generator.d_model.to_string()),
            ("generator.n_heads", self.generator.n_heads.to_string()),
            ("generator.ffn_dim", self.generator.ffn_dim.to_string()),
            ("generator.max_seq_len", self.generator.max_seq_len.to_string()),
            ("generator.tie_embeddings", self.generator.tie_embeddings.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.lr", format!("{:e}", self.lr)),
            ("train.weight_decay", format!("{:e}", self.weight_decay)),
            ("train.batch_size", self.batch_size.to_string()),
            ("pretrain.epochs", self.pretrain_epochs.to_string()),
            ("pretrain.lr", format!("{:e}", self.pretrain_lr)),
            ("atv.lambda", format!("{:e}", self.lambda)),
            ("atv.layers", self.layers.to_string()),
            ("atv.position_policy", policy_name(self.policy).to_string()),
            ("ftv.lambda", format!("{:e}", self.ftv_lambda)),
            ("ftv.k", self.ftv_k.to_string()),
            ("icl.k", self.icl_k.to_string()),
            ("lora.rank", self.lora.rank.to_string()),
            ("lora.alpha", format!("{:e}", self.lora.alpha)),
            ("lora.dropout", format!("{:e}", self.lora.dropout)),
            ("lora.lr", format!("{:e}", self.lora_lr)),
            ("prefix.length", self.prefix_len.to_string()),
            ("prefix.lr", format!("{:e}", self.prefix_lr)),
            ("data.seed", self.data_seed.to_string()),
            ("data.train", self.sizes.train.to_string()),
            ("data.test", self.sizes.test.to_string()),
            ("capacity.ladder", ladder.join(",")),
        ];
        lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
