//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are skipped.
//! Every key has a default (see [`RunConfig::default`]); unknown or repeated
//! keys are rejected. `backbone` is a comma-separated list of
//! `width/stride` stages; `value_channels = auto` means four times
//! `key_channels`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use tmanet::data::{AugmentParams, SamplerMode};
use tmanet::model::{Aggregation, AttentionScaling, EncoderKind, ModelConfig, Stage};
use tmanet::train::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub memory_length: usize,
    pub key_channels: usize,
    /// `None` means `4 · key_channels`.
    pub value_channels: Option<usize>,
    pub num_classes: usize,
    pub backbone: Vec<Stage>,
    pub aggregation: Aggregation,
    pub attention_scaling: AttentionScaling,
    pub encoder: EncoderKind,
    pub aux_weight: f64,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_iters: usize,
    pub poly_power: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub sampler: SamplerMode,
    pub window: usize,
    pub augment: bool,
    pub augment_min_ratio: f64,
    pub augment_max_ratio: f64,
    pub augment_crop: usize,
    pub augment_hflip_prob: f64,
    /// Training dataset; `--data` on the command line takes precedence.
    pub data: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let a = AugmentParams::default();
        Self {
            memory_length: m.memory_length,
            key_channels: m.key_channels,
            value_channels: None,
            num_classes: m.num_classes,
            backbone: m.backbone,
            aggregation: m.aggregation,
            attention_scaling: m.attention_scaling,
            encoder: m.encoder,
            aux_weight: t.aux_weight,
            base_lr: t.base_lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            total_iters: t.total_iters,
            poly_power: t.poly_power,
            batch_size: t.batch_size,
            seed: t.seed,
            sampler: t.sampler,
            window: t.window,
            augment: t.augment.is_some(),
            augment_min_ratio: a.min_ratio,
            augment_max_ratio: a.max_ratio,
            augment_crop: a.crop,
            augment_hflip_prob: a.hflip_prob,
            data: String::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value '{value}' for {key}")))
}

fn parse_enum<T: FromStr<Err = tmanet::Error>>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|e| CliError::Usage(format!("{key}: {e}")))
}

fn parse_backbone(value: &str) -> Result<Vec<Stage>, CliError> {
    value
        .split(',')
        .map(|stage| {
            let (w, s) = stage
                .trim()
                .split_once('/')
                .ok_or_else(|| CliError::Usage(format!("backbone stage '{stage}' is not width/stride")))?;
            Ok(Stage { width: parse("backbone width", w.trim())?, stride: parse("backbone stride", s.trim())? })
        })
        .collect()
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "memory_length",
        "key_channels",
        "value_channels",
        "num_classes",
        "backbone",
        "aggregation",
        "attention_scaling",
        "encoder",
        "aux_weight",
        "base_lr",
        "momentum",
        "weight_decay",
        "total_iters",
        "poly_power",
        "batch_size",
        "seed",
        "sampler",
        "window",
        "augment",
        "augment_min_ratio",
        "augment_max_ratio",
        "augment_crop",
        "augment_hflip_prob",
        "data",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "memory_length" => self.memory_length = parse(key, value)?,
            "key_channels" => self.key_channels = parse(key, value)?,
            "value_channels" => {
                self.value_channels = if value == "auto" { None } else { Some(parse(key, value)?) }
            }
            "num_classes" => self.num_classes = parse(key, value)?,
            "backbone" => self.backbone = parse_backbone(value)?,
            "aggregation" => self.aggregation = parse_enum(key, value)?,
            "attention_scaling" => self.attention_scaling = parse_enum(key, value)?,
            "encoder" => self.encoder = parse_enum(key, value)?,
            "aux_weight" => self.aux_weight = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "total_iters" => self.total_iters = parse(key, value)?,
            "poly_power" => self.poly_power = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "sampler" => self.sampler = parse_enum(key, value)?,
            "window" => self.window = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            "augment_min_ratio" => self.augment_min_ratio = parse(key, value)?,
            "augment_max_ratio" => self.augment_max_ratio = parse(key, value)?,
            "augment_crop" => self.augment_crop = parse(key, value)?,
            "augment_hflip_prob" => self.augment_hflip_prob = parse(key, value)?,
            "data" => self.data = value.to_string(),
            other => return Err(CliError::Usage(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies the assignments in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(CliError::Usage(format!("line {}: duplicate key '{key}'", n + 1)));
            }
            self.set(key, value.trim())
                .map_err(|e| CliError::Usage(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// `key=value` override as given to `--set`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override '{assignment}' is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Every key with its effective value; parsing the output reproduces
    /// `self` exactly.
    pub fn to_text(&self) -> String {
        let backbone: Vec<String> = self.backbone.iter().map(|s| format!("{}/{}", s.width, s.stride)).collect();
        let value_channels = self.value_channels.map_or_else(|| "auto".to_string(), |v| v.to_string());
        let values: [String; 24] = [
            self.memory_length.to_string(),
            self.key_channels.to_string(),
            value_channels,
            self.num_classes.to_string(),
            backbone.join(","),
            self.aggregation.to_string(),
            self.attention_scaling.to_string(),
            self.encoder.to_string(),
            self.aux_weight.to_string(),
            self.base_lr.to_string(),
            self.momentum.to_string(),
            self.weight_decay.to_string(),
            self.total_iters.to_string(),
            self.poly_power.to_string(),
            self.batch_size.to_string(),
            self.seed.to_string(),
            self.sampler.to_string(),
            self.window.to_string(),
            self.augment.to_string(),
            self.augment_min_ratio.to_string(),
            self.augment_max_ratio.to_string(),
            self.augment_crop.to_string(),
            self.augment_hflip_prob.to_string(),
            self.data.clone(),
        ];
        let mut out = String::new();
        for (k, v) in Self::KEYS.iter().zip(values) {
            writeln!(out, "{k} = {v}").expect("writing to a String");
        }
        out
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let cfg = ModelConfig {
            memory_length: self.memory_length,
            key_channels: self.key_channels,
            value_channels: self.value_channels.unwrap_or(4 * self.key_channels),
            num_classes: self.num_classes,
            backbone: self.backbone.clone(),
            aggregation: self.aggregation,
            attention_scaling: self.attention_scaling,
            encoder: self.encoder,
            aux_loss_weight: self.aux_weight,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            base_lr: self.base_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            total_iters: self.total_iters,
            poly_power: self.poly_power,
            batch_size: self.batch_size,
            aux_weight: self.aux_weight,
            seed: self.seed,
            sampler: self.sampler,
            window: self.window,
            augment: self.augment.then_some(AugmentParams {
                min_ratio: self.augment_min_ratio,
                max_ratio: self.augment_max_ratio,
                crop: self.augment_crop,
                hflip_prob: self.augment_hflip_prob,
            }),
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}
