//! Flat `key=value` run configuration with dotted namespaces.
//!
//! Lines starting with `#` and blank lines are ignored. Every key has a
//! default, so a file only needs the keys it changes. Serialization emits
//! every key in a fixed order and parses back to an equal value.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::corruption::{build_schedule, NoiseSchedule};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::objectives::LossConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl NoiseConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// `None` means 5% of `steps`.
    pub warmup_steps: Option<usize>,
    pub seed: u64,
    pub log_every: usize,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub hflip: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            steps: 300,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            warmup_steps: None,
            seed: 0,
            log_every: 1,
            checkpoint_every: 0,
            hflip: true,
        }
    }
}

impl OptimConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| (self.steps as f64 * 0.05).round() as usize)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    Synthetic,
    Cifar10,
}

impl fmt::Display for DataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataKind::Synthetic => "synthetic",
            DataKind::Cifar10 => "cifar10",
        })
    }
}

impl FromStr for DataKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DataKind::Synthetic),
            "cifar10" => Ok(DataKind::Cifar10),
            other => Err(Error::Config(format!(
                "unknown data.kind `{other}` (expected synthetic or cifar10)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    /// CIFAR-10 directory when `kind` is cifar10.
    pub path: PathBuf,
    pub classes: usize,
    pub samples_per_class: usize,
    pub eval_per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Synthetic,
            path: PathBuf::new(),
            classes: 10,
            samples_per_class: 200,
            eval_per_class: 50,
            noise_std: 0.05,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub noise: NoiseConfig,
    pub train: OptimConfig,
    pub data: DataConfig,
}

/// Every accepted key, in serialization order.
pub const KEYS: &[&str] = &[
    "encoder.image_size",
    "encoder.patch_size",
    "encoder.channels",
    "encoder.embed_dim",
    "encoder.depth",
    "encoder.heads",
    "encoder.mlp_ratio",
    "encoder.noise_block",
    "encoder.strategy",
    "encoder.mask_ratio",
    "encoder.disruption_weight",
    "encoder.denoise_weight",
    "encoder.use_cls_token",
    "loss.disrupt_layers",
    "loss.disrupt_columns",
    "loss.normalize_per_patch",
    "noise.timesteps",
    "noise.beta_start",
    "noise.beta_end",
    "train.steps",
    "train.batch_size",
    "train.lr",
    "train.weight_decay",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.warmup_steps",
    "train.seed",
    "train.log_every",
    "train.checkpoint_every",
    "train.hflip",
    "data.kind",
    "data.path",
    "data.classes",
    "data.samples_per_class",
    "data.eval_per_class",
    "data.noise_std",
    "data.seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "cannot parse `{value}` for {key} as a boolean"
        ))),
    }
}

impl TrainConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let e = &mut self.encoder;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "encoder.image_size" => e.image_size = parse(key, v)?,
            "encoder.patch_size" => e.patch_size = parse(key, v)?,
            "encoder.channels" => e.channels = parse(key, v)?,
            "encoder.embed_dim" => e.embed_dim = parse(key, v)?,
            "encoder.depth" => e.depth = parse(key, v)?,
            "encoder.heads" => e.heads = parse(key, v)?,
            "encoder.mlp_ratio" => e.mlp_ratio = parse(key, v)?,
            "encoder.noise_block" => e.noise_block = parse(key, v)?,
            "encoder.strategy" => e.strategy = v.parse()?,
            "encoder.mask_ratio" => e.mask_ratio = parse(key, v)?,
            "encoder.disruption_weight" => e.disruption_weight = parse(key, v)?,
            "encoder.denoise_weight" => e.denoise_weight = parse(key, v)?,
            "encoder.use_cls_token" => e.use_cls_token = parse_bool(key, v)?,
            "loss.disrupt_layers" => {
                self.loss.disrupt_layers = if v == "all" {
                    None
                } else {
                    Some(
                        v.split(',')
                            .filter(|s| !s.trim().is_empty())
                            .map(|s| parse(key, s.trim()))
                            .collect::<Result<_>>()?,
                    )
                }
            }
            "loss.disrupt_columns" => self.loss.disrupt_columns = v.parse()?,
            "loss.normalize_per_patch" => self.loss.normalize_per_patch = parse_bool(key, v)?,
            "noise.timesteps" => self.noise.timesteps = parse(key, v)?,
            "noise.beta_start" => self.noise.beta_start = parse(key, v)?,
            "noise.beta_end" => self.noise.beta_end = parse(key, v)?,
            "train.steps" => t.steps = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.eps" => t.eps = parse(key, v)?,
            "train.warmup_steps" => {
                t.warmup_steps = if v == "auto" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "train.seed" => t.seed = parse(key, v)?,
            "train.log_every" => t.log_every = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "train.hflip" => t.hflip = parse_bool(key, v)?,
            "data.kind" => d.kind = v.parse()?,
            "data.path" => d.path = PathBuf::from(v),
            "data.classes" => d.classes = parse(key, v)?,
            "data.samples_per_class" => d.samples_per_class = parse(key, v)?,
            "data.eval_per_class" => d.eval_per_class = parse(key, v)?,
            "data.noise_std" => d.noise_std = parse(key, v)?,
            "data.seed" => d.seed = parse(key, v)?,
            _ => {
                return Err(Error::UnknownKey {
                    key: key.to_string(),
                    valid: KEYS.iter().map(|k| k.to_string()).collect(),
                })
            }
        }
        Ok(())
    }

    /// Applies a `key=value` string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{assignment}`")))?;
        self.set(k.trim(), v)
    }

    /// Parses a config text on top of the defaults and validates it.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            cfg.apply_override(line).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let e = &self.encoder;
        let t = &self.train;
        let d = &self.data;
        Some(match key {
            "encoder.image_size" => e.image_size.to_string(),
            "encoder.patch_size" => e.patch_size.to_string(),
            "encoder.channels" => e.channels.to_string(),
            "encoder.embed_dim" => e.embed_dim.to_string(),
            "encoder.depth" => e.depth.to_string(),
            "encoder.heads" => e.heads.to_string(),
            "encoder.mlp_ratio" => e.mlp_ratio.to_string(),
            "encoder.noise_block" => e.noise_block.to_string(),
            "encoder.strategy" => e.strategy.to_string(),
            "encoder.mask_ratio" => e.mask_ratio.to_string(),
            "encoder.disruption_weight" => e.disruption_weight.to_string(),
            "encoder.denoise_weight" => e.denoise_weight.to_string(),
            "encoder.use_cls_token" => e.use_cls_token.to_string(),
            "loss.disrupt_layers" => match &self.loss.disrupt_layers {
                None => "all".into(),
                Some(ls) => ls
                    .iter()
                    .map(|l| l.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            },
            "loss.disrupt_columns" => self.loss.disrupt_columns.to_string(),
            "loss.normalize_per_patch" => self.loss.normalize_per_patch.to_string(),
            "noise.timesteps" => self.noise.timesteps.to_string(),
            "noise.beta_start" => self.noise.beta_start.to_string(),
            "noise.beta_end" => self.noise.beta_end.to_string(),
            "train.steps" => t.steps.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.beta1" => t.beta1.to_string(),
            "train.beta2" => t.beta2.to_string(),
            "train.eps" => t.eps.to_string(),
            "train.warmup_steps" => t.warmup_steps.map_or("auto".into(), |w| w.to_string()),
            "train.seed" => t.seed.to_string(),
            "train.log_every" => t.log_every.to_string(),
            "train.checkpoint_every" => t.checkpoint_every.to_string(),
            "train.hflip" => t.hflip.to_string(),
            "data.kind" => d.kind.to_string(),
            "data.path" => d.path.display().to_string(),
            "data.classes" => d.classes.to_string(),
            "data.samples_per_class" => d.samples_per_class.to_string(),
            "data.eval_per_class" => d.eval_per_class.to_string(),
            "data.noise_std" => d.noise_std.to_string(),
            "data.seed" => d.seed.to_string(),
            _ => return None,
        })
    }

    /// `key=value` lines for every key, in [`KEYS`] order.
    pub fn to_lines(&self) -> Vec<String> {
        KEYS.iter()
            .map(|k| format!("{k}={}", self.get(k).expect("every listed key has a value")))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = self.to_lines().join("\n");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.noise.schedule()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(t.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be > 0, got {}", t.lr)));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) {
            return Err(Error::Config(
                "adam betas must lie in [0, 1) and eps be > 0".into(),
            ));
        }
        if !(t.weight_decay >= 0.0) {
            return Err(Error::Config(
                "train.weight_decay must be nonnegative".into(),
            ));
        }
        if t.log_every == 0 {
            return Err(Error::Config("train.log_every must be at least 1".into()));
        }
        if let Some(ls) = &self.loss.disrupt_layers {
            if let Some(bad) = ls.iter().find(|&&l| l >= self.encoder.depth) {
                return Err(Error::Config(format!(
                    "loss.disrupt_layers entry {bad} outside 0..{}",
                    self.encoder.depth
                )));
            }
        }
        let d = &self.data;
        if d.kind == DataKind::Synthetic {
            if d.classes < 2 || d.samples_per_class == 0 {
                return Err(Error::Config(
                    "synthetic data needs >= 2 classes and samples".into(),
                ));
            }
            if self.encoder.image_size < 8 || self.encoder.channels != 3 {
                return Err(Error::Config(
                    "synthetic data needs 3 channels and images of at least 8 pixels".into(),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::Strategy;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.set("encoder.strategy", "diffused").unwrap();
        cfg.set("loss.disrupt_layers", "0,3").unwrap();
        cfg.set("train.lr", "0.00031").unwrap();
        cfg.set("train.warmup_steps", "7").unwrap();
        let back = TrainConfig::parse_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.encoder.strategy, Strategy::Diffused);
    }

    #[test]
    fn every_key_is_settable() {
        let cfg = TrainConfig::default();
        for k in KEYS {
            let mut c = cfg.clone();
            c.set(k, &cfg.get(k).unwrap()).unwrap();
            assert_eq!(c, cfg, "{k}");
        }
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let mut cfg = TrainConfig::default();
        let err = cfg.apply_override("encoder.nope=1").unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("encoder.nope") && msg.contains("encoder.noise_block"),
            "{msg}"
        );
    }

    #[test]
    fn comments_and_validation() {
        let cfg =
            TrainConfig::parse_text("# comment\n\nencoder.depth = 4\nencoder.noise_block=4\n")
                .unwrap();
        assert_eq!(cfg.encoder.depth, 4);
        assert!(TrainConfig::parse_text("encoder.noise_block=9").is_err());
        assert!(TrainConfig::parse_text("train.batch_size=0").is_err());
        assert!(TrainConfig::parse_text("train.lr=abc").is_err());
        assert_eq!(TrainConfig::default().train.warmup(), 15);
    }
}
