use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::edge::EdgeKernel;
use crate::error::{config_err, Error, Result};
use crate::losses::LossWeights;
use crate::nn::ArchConfig;
use crate::optim::{AdaBoundConfig, BoundMode};

/// Everything a training run needs. Parsed from flat `key = value` files
/// with dotted section prefixes.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dir_a: PathBuf,
    pub dir_b: PathBuf,
    pub arch: ArchConfig,
    pub iterations: u64,
    pub seed: u64,
    pub weights: LossWeights,
    pub optim: AdaBoundConfig,
    /// Write a checkpoint every this many iterations; 0 means only at the end.
    pub checkpoint_every: u64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub resume: Option<PathBuf>,
    pub prefetch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dir_a: PathBuf::from("data/low"),
            dir_b: PathBuf::from("data/normal"),
            arch: ArchConfig::default(),
            iterations: 10_000,
            seed: 0,
            weights: LossWeights::default(),
            optim: AdaBoundConfig::default(),
            checkpoint_every: 1000,
            checkpoint: PathBuf::from("leugan.ckpt"),
            log: PathBuf::from("train_log.csv"),
            resume: None,
            prefetch: true,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| config_err!("{key}: cannot parse {v:?}: {e}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(config_err!("{key}: expected a boolean, got {v:?}")),
    }
}

impl TrainConfig {
    /// Parses config text. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() { p } else { base.join(p) }
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected `key = value`, got {raw:?}", lineno + 1))?;
            let (key, v) = (key.trim(), value.trim());
            match key {
                "data.dir_a" => cfg.dir_a = path(v),
                "data.dir_b" => cfg.dir_b = path(v),
                "model.image_size" => cfg.arch.image_size = parse_num(key, v)?,
                "model.base_channels" => cfg.arch.base_channels = parse_num(key, v)?,
                "model.n_down" => cfg.arch.n_down = parse_num(key, v)?,
                "model.res_blocks" => cfg.arch.n_res_blocks = parse_num(key, v)?,
                "model.d_base_channels" => cfg.arch.d_base_channels = parse_num(key, v)?,
                "model.d_local_down" => cfg.arch.d_local_down = parse_num(key, v)?,
                "model.d_global_down" => cfg.arch.d_global_down = parse_num(key, v)?,
                "model.edge_kernel" => {
                    cfg.arch.edge_kernel = v.parse::<EdgeKernel>().map_err(|e| config_err!("{key}: {e}"))?
                }
                "train.iterations" => cfg.iterations = parse_num(key, v)?,
                "train.seed" => cfg.seed = parse_num(key, v)?,
                "train.checkpoint_every" => cfg.checkpoint_every = parse_num(key, v)?,
                "train.checkpoint" => cfg.checkpoint = path(v),
                "train.log" => cfg.log = path(v),
                "train.resume" => cfg.resume = Some(path(v)),
                "train.prefetch" => cfg.prefetch = parse_bool(key, v)?,
                "loss.structural" => cfg.weights.structural = parse_num(key, v)?,
                "loss.identity" => cfg.weights.identity = parse_num(key, v)?,
                "loss.adversarial" => cfg.weights.adversarial = parse_num(key, v)?,
                "loss.cycle" => cfg.weights.cycle = parse_num(key, v)?,
                "loss.auxiliary" => cfg.weights.auxiliary = parse_num(key, v)?,
                "optim.lr" => cfg.optim.lr = parse_num(key, v)?,
                "optim.final_lr" => cfg.optim.final_lr = parse_num(key, v)?,
                "optim.beta1" => cfg.optim.betas.0 = parse_num(key, v)?,
                "optim.beta2" => cfg.optim.betas.1 = parse_num(key, v)?,
                "optim.eps" => cfg.optim.eps = parse_num(key, v)?,
                "optim.gamma" => cfg.optim.gamma = parse_num(key, v)?,
                "optim.weight_decay" => cfg.optim.weight_decay = parse_num(key, v)?,
                "optim.bounded" => {
                    cfg.optim.bounds = if parse_bool(key, v)? { BoundMode::Clipped } else { BoundMode::Unbounded }
                }
                _ => return Err(config_err!("line {}: unknown key {key:?}", lineno + 1)),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.arch.image_size % 8 != 0 {
            return Err(config_err!("image_size must be divisible by 8, got {}", self.arch.image_size));
        }
        self.arch.validate()?;
        if self.iterations == 0 {
            return Err(config_err!("iterations must be at least 1"));
        }
        if !self.weights.as_array().iter().all(|w| w.is_finite() && *w >= 0.0) {
            return Err(config_err!("loss weights must be finite and non-negative: {:?}", self.weights));
        }
        self.optim.validate()
    }

    /// Serializes back to the file format; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let a = &self.arch;
        let w = &self.weights;
        let o = &self.optim;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("data.dir_a", self.dir_a.display().to_string());
        kv("data.dir_b", self.dir_b.display().to_string());
        kv("model.image_size", a.image_size.to_string());
        kv("model.base_channels", a.base_channels.to_string());
        kv("model.n_down", a.n_down.to_string());
        kv("model.res_blocks", a.n_res_blocks.to_string());
        kv("model.d_base_channels", a.d_base_channels.to_string());
        kv("model.d_local_down", a.d_local_down.to_string());
        kv("model.d_global_down", a.d_global_down.to_string());
        kv("model.edge_kernel", a.edge_kernel.to_string());
        kv("train.iterations", self.iterations.to_string());
        kv("train.seed", self.seed.to_string());
        kv("train.checkpoint_every", self.checkpoint_every.to_string());
        kv("train.checkpoint", self.checkpoint.display().to_string());
        kv("train.log", self.log.display().to_string());
        if let Some(r) = &self.resume {
            kv("train.resume", r.display().to_string());
        }
        kv("train.prefetch", self.prefetch.to_string());
        kv("loss.structural", w.structural.to_string());
        kv("loss.identity", w.identity.to_string());
        kv("loss.adversarial", w.adversarial.to_string());
        kv("loss.cycle", w.cycle.to_string());
        kv("loss.auxiliary", w.auxiliary.to_string());
        kv("optim.lr", o.lr.to_string());
        kv("optim.final_lr", o.final_lr.to_string());
        kv("optim.beta1", o.betas.0.to_string());
        kv("optim.beta2", o.betas.1.to_string());
        kv("optim.eps", o.eps.to_string());
        kv("optim.gamma", o.gamma.to_string());
        kv("optim.weight_decay", o.weight_decay.to_string());
        kv("optim.bounded", (o.bounds == BoundMode::Clipped).to_string());
        s
    }
}
