//! Flat `key = value` run configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoder::EncoderVariant;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::thinking::SqMode;
use crate::train::{SynthSpec, TrainConfig};

/// Synthetic corpus and its split.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub samples: usize,
    pub seed: u64,
    /// Fraction of the corpus held out from training.
    pub holdout: f64,
    pub spec: SynthSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { samples: 2000, seed: 0, holdout: 0.2, spec: SynthSpec::default() }
    }
}

impl DataConfig {
    pub fn split_point(&self) -> usize {
        self.samples - (self.holdout * self.samples as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathConfig {
    pub checkpoint_dir: PathBuf,
    pub log_file: PathBuf,
    /// Write an intermediate checkpoint every this many epochs; 0 for none.
    pub checkpoint_every: usize,
}

impl Default for PathConfig {
    fn default() -> Self {
        PathConfig {
            checkpoint_dir: "checkpoint".into(),
            log_file: "train_log.csv".into(),
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub paths: PathConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e: T::Err| Error::ConfigKey { key: key.into(), reason: format!("cannot parse `{value}`: {e}") })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigKey { key: "config".into(), reason: format!("{}: {e}", path.display()) })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.spec.validate().map_err(|e| Error::ConfigKey { key: "data.max_len".into(), reason: e.to_string() })?;
        if self.data.spec.max_len > self.model.slots {
            return Err(Error::ConfigKey { key: "data.max_len".into(), reason: "longer than model.slots".into() });
        }
        if (self.data.spec.height, self.data.spec.width) != (self.model.image_height, self.model.image_width) {
            return Err(Error::ConfigKey {
                key: "data.height".into(),
                reason: "raster geometry differs from the model input".into(),
            });
        }
        if !(0.0..1.0).contains(&self.data.holdout) {
            return Err(Error::ConfigKey { key: "data.holdout".into(), reason: "must lie in [0, 1)".into() });
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t, d, p) = (&mut self.model, &mut self.train, &mut self.data, &mut self.paths);
        match key {
            "model.image_height" => {
                m.image_height = parse(key, v)?;
                d.spec.height = m.image_height;
            }
            "model.image_width" => {
                m.image_width = parse(key, v)?;
                d.spec.width = m.image_width;
            }
            "model.patch_height" => m.patch_height = parse(key, v)?,
            "model.patch_width" => m.patch_width = parse(key, v)?,
            "model.model_dim" => m.model_dim = parse(key, v)?,
            "model.head_dim" => m.head_dim = parse(key, v)?,
            "model.lambda_init" => m.lambda_init = parse(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "model.encoder" => m.encoder = parse::<EncoderVariant>(key, v)?,
            "model.encoder_depth" => m.encoder_depth = parse(key, v)?,
            "model.split_ffn" => m.split_ffn = parse(key, v)?,
            "model.slots" => m.slots = parse(key, v)?,
            "model.decoder_depth" => m.decoder_depth = parse(key, v)?,
            "model.sq_mode" => m.sq_mode = parse::<SqMode>(key, v)?,
            "model.use_pam" => m.use_pam = parse(key, v)?,
            "model.use_sq" => m.use_sq = parse(key, v)?,
            "model.use_mmcv" => m.use_mmcv = parse(key, v)?,
            "train.alpha" => t.alpha = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.warmup_frac" => t.warmup_frac = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.tau_start" => t.tau_start = parse(key, v)?,
            "train.tau_end" => t.tau_end = parse(key, v)?,
            "train.clip_norm" => t.clip_norm = parse(key, v)?,
            "data.samples" => d.samples = parse(key, v)?,
            "data.seed" => d.seed = parse(key, v)?,
            "data.holdout" => d.holdout = parse(key, v)?,
            "data.alphabet" => d.spec.alphabet = v.to_string(),
            "data.min_len" => d.spec.min_len = parse(key, v)?,
            "data.max_len" => d.spec.max_len = parse(key, v)?,
            "data.rotation" => d.spec.max_rotation = parse(key, v)?,
            "data.noise" => d.spec.noise_sigma = parse(key, v)?,
            "data.intensity" => d.spec.intensity = parse(key, v)?,
            "data.shift" => d.spec.max_shift = parse(key, v)?,
            "paths.checkpoint_dir" => p.checkpoint_dir = v.into(),
            "paths.log_file" => p.log_file = v.into(),
            "paths.checkpoint_every" => p.checkpoint_every = parse(key, v)?,
            other => return Err(Error::ConfigKey { key: other.into(), reason: "unknown key".into() }),
        }
        Ok(())
    }

    /// Every effective setting, one `key = value` per line, in a fixed
    /// order. Parsing the output yields an equal config.
    pub fn render(&self) -> String {
        let (m, t, d, p) = (&self.model, &self.train, &self.data, &self.paths);
        let pairs: Vec<(&str, String)> = vec![
            ("model.image_height", m.image_height.to_string()),
            ("model.image_width", m.image_width.to_string()),
            ("model.patch_height", m.patch_height.to_string()),
            ("model.patch_width", m.patch_width.to_string()),
            ("model.model_dim", m.model_dim.to_string()),
            ("model.head_dim", m.head_dim.to_string()),
            ("model.lambda_init", m.lambda_init.to_string()),
            ("model.mlp_ratio", m.mlp_ratio.to_string()),
            ("model.encoder", m.encoder.to_string()),
            ("model.encoder_depth", m.encoder_depth.to_string()),
            ("model.split_ffn", m.split_ffn.to_string()),
            ("model.slots", m.slots.to_string()),
            ("model.decoder_depth", m.decoder_depth.to_string()),
            ("model.sq_mode", m.sq_mode.to_string()),
            ("model.use_pam", m.use_pam.to_string()),
            ("model.use_sq", m.use_sq.to_string()),
            ("model.use_mmcv", m.use_mmcv.to_string()),
            ("train.alpha", t.alpha.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.warmup_frac", t.warmup_frac.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.tau_start", t.tau_start.to_string()),
            ("train.tau_end", t.tau_end.to_string()),
            ("train.clip_norm", t.clip_norm.to_string()),
            ("data.samples", d.samples.to_string()),
            ("data.seed", d.seed.to_string()),
            ("data.holdout", d.holdout.to_string()),
            ("data.alphabet", d.spec.alphabet.clone()),
            ("data.min_len", d.spec.min_len.to_string()),
            ("data.max_len", d.spec.max_len.to_string()),
            ("data.rotation", d.spec.max_rotation.to_string()),
            ("data.noise", d.spec.noise_sigma.to_string()),
            ("data.intensity", d.spec.intensity.to_string()),
            ("data.shift", d.spec.max_shift.to_string()),
            ("paths.checkpoint_dir", p.checkpoint_dir.display().to_string()),
            ("paths.log_file", p.log_file.display().to_string()),
            ("paths.checkpoint_every", p.checkpoint_every.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
