//! Flat `key = value` configuration for pretraining.

use std::path::Path;
use std::str::FromStr;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

use super::augment::AugConfig;
use super::head::HeadConfig;
use super::loss::Temps;
use super::LossWeights;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate for a batch of 256; scaled linearly with the batch size.
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// Per-tensor gradient norm cap; 0 disables clipping.
    pub clip_grad: f64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            base_lr: 5e-4,
            min_lr: 1e-6,
            weight_decay: 0.04,
            warmup_epochs: 10,
            clip_grad: 3.0,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }
}

/// Everything pretraining needs besides the variant, data and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct DirlConfig {
    pub encoder: EncoderConfig,
    pub shared_disentangle: bool,
    pub heads: HeadConfig,
    pub temps: Temps,
    pub center_momentum: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub weights: LossWeights,
    pub cell_types: usize,
    pub train: TrainConfig,
    pub aug: AugConfig,
}

impl Default for DirlConfig {
    fn default() -> Self {
        DirlConfig {
            encoder: EncoderConfig::default(),
            shared_disentangle: true,
            heads: HeadConfig::default(),
            temps: Temps::default(),
            center_momentum: 0.9,
            ema_start: 0.996,
            ema_end: 1.0,
            weights: LossWeights::default(),
            cell_types: 2,
            train: TrainConfig::default(),
            aug: AugConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
}

impl DirlConfig {
    /// Every key with its current value, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let e = &self.encoder;
        let t = &self.train;
        vec![
            ("encoder.image_w", e.image_w.to_string()),
            ("encoder.image_h", e.image_h.to_string()),
            ("encoder.p", e.patch.to_string()),
            ("encoder.d", e.dim.to_string()),
            ("encoder.depth", e.depth.to_string()),
            ("encoder.heads", e.heads.to_string()),
            ("encoder.mlp_ratio", e.mlp_ratio.to_string()),
            ("encoder.attn_scale", e.attn_scale.to_string()),
            ("encoder.pixel_mean", e.pixel_mean.to_string()),
            ("encoder.pixel_std", e.pixel_std.to_string()),
            ("disentangle.shared_params", self.shared_disentangle.to_string()),
            ("ssl.k_region", self.heads.k_region.to_string()),
            ("ssl.k_dis", self.heads.k_dis.to_string()),
            ("ssl.head_hidden", self.heads.hidden.to_string()),
            ("ssl.head_bottleneck", self.heads.bottleneck.to_string()),
            ("ssl.temp_student", self.temps.student.to_string()),
            ("ssl.temp_teacher", self.temps.teacher.to_string()),
            ("ssl.center_momentum", self.center_momentum.to_string()),
            ("ssl.ema_start", self.ema_start.to_string()),
            ("ssl.ema_end", self.ema_end.to_string()),
            ("ssl.lambda1", self.weights.lambda1.to_string()),
            ("ssl.lambda2", self.weights.lambda2.to_string()),
            ("ssl.aux_weight", self.weights.aux.to_string()),
            ("ssl.cell_types", self.cell_types.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.base_lr", t.base_lr.to_string()),
            ("train.min_lr", t.min_lr.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.warmup_epochs", t.warmup_epochs.to_string()),
            ("train.clip_grad", t.clip_grad.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("aug.scale_min", self.aug.scale_min.to_string()),
            ("aug.scale_max", self.aug.scale_max.to_string()),
            ("aug.flip_prob", self.aug.flip_prob.to_string()),
            ("aug.brightness", self.aug.brightness.to_string()),
            ("aug.contrast", self.aug.contrast.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let e = &mut self.encoder;
        let t = &mut self.train;
        match key {
            "encoder.image_w" => e.image_w = parse(key, v)?,
            "encoder.image_h" => e.image_h = parse(key, v)?,
            "encoder.p" => e.patch = parse(key, v)?,
            "encoder.d" => e.dim = parse(key, v)?,
            "encoder.depth" => e.depth = parse(key, v)?,
            "encoder.heads" => e.heads = parse(key, v)?,
            "encoder.mlp_ratio" => e.mlp_ratio = parse(key, v)?,
            "encoder.attn_scale" => e.attn_scale = v.parse()?,
            "encoder.pixel_mean" => e.pixel_mean = parse(key, v)?,
            "encoder.pixel_std" => e.pixel_std = parse(key, v)?,
            "disentangle.shared_params" => self.shared_disentangle = parse(key, v)?,
            "ssl.k_region" => self.heads.k_region = parse(key, v)?,
            "ssl.k_dis" => self.heads.k_dis = parse(key, v)?,
            "ssl.head_hidden" => self.heads.hidden = parse(key, v)?,
            "ssl.head_bottleneck" => self.heads.bottleneck = parse(key, v)?,
            "ssl.temp_student" => self.temps.student = parse(key, v)?,
            "ssl.temp_teacher" => self.temps.teacher = parse(key, v)?,
            "ssl.center_momentum" => self.center_momentum = parse(key, v)?,
            "ssl.ema_start" => self.ema_start = parse(key, v)?,
            "ssl.ema_end" => self.ema_end = parse(key, v)?,
            "ssl.lambda1" => self.weights.lambda1 = parse(key, v)?,
            "ssl.lambda2" => self.weights.lambda2 = parse(key, v)?,
            "ssl.aux_weight" => self.weights.aux = parse(key, v)?,
            "ssl.cell_types" => self.cell_types = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.base_lr" => t.base_lr = parse(key, v)?,
            "train.min_lr" => t.min_lr = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.warmup_epochs" => t.warmup_epochs = parse(key, v)?,
            "train.clip_grad" => t.clip_grad = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "aug.scale_min" => self.aug.scale_min = parse(key, v)?,
            "aug.scale_max" => self.aug.scale_max = parse(key, v)?,
            "aug.flip_prob" => self.aug.flip_prob = parse(key, v)?,
            "aug.brightness" => self.aug.brightness = parse(key, v)?,
            "aug.contrast" => self.aug.contrast = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Defaults overridden by `key = value` lines; `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = DirlConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Rebuilds a config from stored pairs, ignoring keys outside the schema.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let known: Vec<&str> = DirlConfig::default().to_pairs().iter().map(|p| p.0).collect();
        let mut cfg = DirlConfig::default();
        for (k, v) in pairs {
            if known.contains(&k) {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.heads.validate()?;
        self.weights.validate()?;
        self.aug.validate()?;
        if self.encoder.channels != 3 {
            return Err(Error::Config("images are RGB; encoder.channels must be 3".into()));
        }
        if !(self.temps.student > 0.0 && self.temps.teacher > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        for (name, m) in [
            ("ssl.center_momentum", self.center_momentum),
            ("ssl.ema_start", self.ema_start),
            ("ssl.ema_end", self.ema_end),
        ] {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::Config(format!("{name} = {m} outside [0, 1]")));
            }
        }
        if self.cell_types == 0 {
            return Err(Error::Config("ssl.cell_types must be at least 1".into()));
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if !(t.base_lr >= 0.0 && t.min_lr >= 0.0 && t.weight_decay >= 0.0 && t.clip_grad >= 0.0) {
            return Err(Error::Config("learning rates, decay and clip must be non-negative".into()));
        }
        Ok(())
    }
}
