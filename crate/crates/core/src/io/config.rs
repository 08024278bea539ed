//! `key = value` hyperparameter files with `#` comments.
//!
//! A `preset = desk|full` line selects the base values; every other key
//! overrides the preset regardless of where it appears in the file.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::embedding::{EdgeChannels, EmbeddingConfig};
use crate::model::ModelConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: invalid value `{value}` for key `{key}`")]
    BadValue {
        key: String,
        value: String,
        line: usize,
    },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { key: String, line: usize },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Values used for full-size cohorts.
    Full,
    /// Scaled-down values for single-machine synthetic experiments.
    Desk,
}

impl FromStr for Preset {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            _ => Err(()),
        }
    }
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::Desk => "desk",
        }
    }
}

/// How the pretraining terms are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PretrainCombine {
    /// `((equivariance + diversity) + metric) / 2`
    Folded,
    /// `(equivariance + diversity + metric) / 3`
    ThreeTerm,
}

impl FromStr for PretrainCombine {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "folded" => Ok(PretrainCombine::Folded),
            "three_term" => Ok(PretrainCombine::ThreeTerm),
            _ => Err(()),
        }
    }
}

impl PretrainCombine {
    fn name(self) -> &'static str {
        match self {
            PretrainCombine::Folded => "folded",
            PretrainCombine::ThreeTerm => "three_term",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub preset: Preset,
    pub seed: u64,

    pub keypoints: usize,
    pub clusters: usize,
    pub n_points: usize,
    pub knn_k: usize,
    pub widths: Vec<usize>,
    pub head_hidden: usize,
    pub leaky_slope: f64,
    pub dynamic_graph: bool,
    pub difference_only: bool,
    pub input_scale: f64,

    pub pretrain_epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Batches per tractogram per pretraining epoch; 0 means a full pass.
    pub pretrain_batches_per_epoch: usize,
    /// Batches per input tractogram per joint epoch; 0 means a full pass.
    pub joint_batches_per_epoch: usize,
    pub pretrain_combine: PretrainCombine,

    pub joint_epochs: usize,
    pub joint_lr: f64,
    pub confidence_thr: f64,

    pub tps_lambda: f64,
    pub huber_delta: f64,
    pub diversity_delta_frac: f64,
    pub kmeans_max_iter: usize,

    pub weight_equivariance: f64,
    pub weight_diversity: f64,
    pub weight_metric: f64,
    pub weight_registration: f64,
    pub weight_kl: f64,

    pub deform_scale: f64,
    pub deform_rotation_deg: f64,
    pub deform_translation: f64,
    pub deform_amplitude: f64,
    pub deform_grid: usize,
    pub deform_domain: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self::preset(Preset::Full)
    }
}

impl Config {
    pub fn preset(preset: Preset) -> Self {
        let full = Self {
            preset: Preset::Full,
            seed: 0,
            keypoints: 128,
            clusters: 800,
            n_points: 14,
            knn_k: 4,
            widths: vec![32, 64, 64],
            head_hidden: 64,
            leaky_slope: 0.2,
            dynamic_graph: true,
            difference_only: false,
            input_scale: 1.0,
            pretrain_epochs: 4000,
            lr: 1e-3,
            lr_decay: 0.1,
            lr_decay_every: 1000,
            weight_decay: 1e-2,
            batch_size: 256,
            pretrain_batches_per_epoch: 1,
            joint_batches_per_epoch: 0,
            pretrain_combine: PretrainCombine::Folded,
            joint_epochs: 10,
            joint_lr: 1e-4,
            confidence_thr: 0.4,
            tps_lambda: 1e-6,
            huber_delta: 1.0,
            diversity_delta_frac: 0.05,
            kmeans_max_iter: 300,
            weight_equivariance: 1.0,
            weight_diversity: 1.0,
            weight_metric: 1.0,
            weight_registration: 1.0,
            weight_kl: 1.0,
            deform_scale: 0.05,
            deform_rotation_deg: 8.0,
            deform_translation: 6.0,
            deform_amplitude: 2.0,
            deform_grid: 3,
            deform_domain: 60.0,
        };
        match preset {
            Preset::Full => full,
            Preset::Desk => Self {
                preset: Preset::Desk,
                keypoints: 16,
                clusters: 8,
                pretrain_epochs: 300,
                lr_decay_every: 100,
                batch_size: 64,
                ..full
            },
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embedding: EmbeddingConfig {
                n_points: self.n_points,
                widths: self.widths.clone(),
                k: self.knn_k,
                leaky_slope: self.leaky_slope,
                dynamic_graph: self.dynamic_graph,
                channels: if self.difference_only {
                    EdgeChannels::DifferenceOnly
                } else {
                    EdgeChannels::Full
                },
                input_scale: self.input_scale,
            },
            keypoints: self.keypoints,
            head_hidden: self.head_hidden,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.n_points < 2 {
            return bad("n_points must be at least 2");
        }
        if self.knn_k == 0 || self.knn_k >= self.n_points {
            return bad("knn_k must satisfy 0 < knn_k < n_points");
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be a nonempty list of positive integers");
        }
        if self.keypoints < 4 {
            return bad("keypoints must be at least 4 for a TPS fit");
        }
        if self.clusters == 0 || self.batch_size < 2 || self.head_hidden == 0 {
            return bad("clusters, head_hidden must be positive and batch_size at least 2");
        }
        if self.deform_grid < 2 {
            return bad("deform_grid must be at least 2");
        }
        let nonneg = [
            self.lr,
            self.joint_lr,
            self.weight_decay,
            self.tps_lambda,
            self.diversity_delta_frac,
            self.deform_scale,
            self.deform_rotation_deg,
            self.deform_translation,
            self.deform_amplitude,
            self.weight_equivariance,
            self.weight_diversity,
            self.weight_metric,
            self.weight_registration,
            self.weight_kl,
        ];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("rates, weights and ranges must be finite and nonnegative");
        }
        if !(self.huber_delta > 0.0 && self.huber_delta.is_finite()) || !(self.deform_domain > 0.0)
        {
            return bad("huber_delta and deform_domain must be positive");
        }
        if !(0.0..=1.0).contains(&self.confidence_thr) {
            return bad("confidence_thr must lie in [0, 1]");
        }
        Ok(())
    }

    /// All keys in dump order with their current values.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let widths = self
            .widths
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("preset", self.preset.name().to_string()),
            ("seed", self.seed.to_string()),
            ("keypoints", self.keypoints.to_string()),
            ("clusters", self.clusters.to_string()),
            ("n_points", self.n_points.to_string()),
            ("knn_k", self.knn_k.to_string()),
            ("widths", widths),
            ("head_hidden", self.head_hidden.to_string()),
            ("leaky_slope", self.leaky_slope.to_string()),
            ("dynamic_graph", self.dynamic_graph.to_string()),
            ("difference_only", self.difference_only.to_string()),
            ("input_scale", self.input_scale.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("lr_decay_every", self.lr_decay_every.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            (
                "pretrain_batches_per_epoch",
                self.pretrain_batches_per_epoch.to_string(),
            ),
            (
                "joint_batches_per_epoch",
                self.joint_batches_per_epoch.to_string(),
            ),
            ("pretrain_combine", self.pretrain_combine.name().to_string()),
            ("joint_epochs", self.joint_epochs.to_string()),
            ("joint_lr", self.joint_lr.to_string()),
            ("confidence_thr", self.confidence_thr.to_string()),
            ("tps_lambda", self.tps_lambda.to_string()),
            ("huber_delta", self.huber_delta.to_string()),
            (
                "diversity_delta_frac",
                self.diversity_delta_frac.to_string(),
            ),
            ("kmeans_max_iter", self.kmeans_max_iter.to_string()),
            ("weight_equivariance", self.weight_equivariance.to_string()),
            ("weight_diversity", self.weight_diversity.to_string()),
            ("weight_metric", self.weight_metric.to_string()),
            ("weight_registration", self.weight_registration.to_string()),
            ("weight_kl", self.weight_kl.to_string()),
            ("deform_scale", self.deform_scale.to_string()),
            ("deform_rotation_deg", self.deform_rotation_deg.to_string()),
            ("deform_translation", self.deform_translation.to_string()),
            ("deform_amplitude", self.deform_amplitude.to_string()),
            ("deform_grid", self.deform_grid.to_string()),
            ("deform_domain", self.deform_domain.to_string()),
        ]
    }

    /// Sets one key from its textual value. Returns `Ok(false)` for an unknown
    /// key and `Err(())` for an unparsable value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, ()> {
        fn p<T: FromStr>(v: &str) -> Result<T, ()> {
            v.parse().map_err(|_| ())
        }
        match key {
            "preset" => self.preset = p(value)?,
            "seed" => self.seed = p(value)?,
            "keypoints" => self.keypoints = p(value)?,
            "clusters" => self.clusters = p(value)?,
            "n_points" => self.n_points = p(value)?,
            "knn_k" => self.knn_k = p(value)?,
            "widths" => {
                self.widths = value
                    .split(',')
                    .map(|w| w.trim().parse().map_err(|_| ()))
                    .collect::<Result<_, _>>()?
            }
            "head_hidden" => self.head_hidden = p(value)?,
            "leaky_slope" => self.leaky_slope = p(value)?,
            "dynamic_graph" => self.dynamic_graph = p(value)?,
            "difference_only" => self.difference_only = p(value)?,
            "input_scale" => self.input_scale = p(value)?,
            "pretrain_epochs" => self.pretrain_epochs = p(value)?,
            "lr" => self.lr = p(value)?,
            "lr_decay" => self.lr_decay = p(value)?,
            "lr_decay_every" => self.lr_decay_every = p(value)?,
            "weight_decay" => self.weight_decay = p(value)?,
            "batch_size" => self.batch_size = p(value)?,
            "pretrain_batches_per_epoch" => self.pretrain_batches_per_epoch = p(value)?,
            "joint_batches_per_epoch" => self.joint_batches_per_epoch = p(value)?,
            "pretrain_combine" => self.pretrain_combine = p(value)?,
            "joint_epochs" => self.joint_epochs = p(value)?,
            "joint_lr" => self.joint_lr = p(value)?,
            "confidence_thr" => self.confidence_thr = p(value)?,
            "tps_lambda" => self.tps_lambda = p(value)?,
            "huber_delta" => self.huber_delta = p(value)?,
            "diversity_delta_frac" => self.diversity_delta_frac = p(value)?,
            "kmeans_max_iter" => self.kmeans_max_iter = p(value)?,
            "weight_equivariance" => self.weight_equivariance = p(value)?,
            "weight_diversity" => self.weight_diversity = p(value)?,
            "weight_metric" => self.weight_metric = p(value)?,
            "weight_registration" => self.weight_registration = p(value)?,
            "weight_kl" => self.weight_kl = p(value)?,
            "deform_scale" => self.deform_scale = p(value)?,
            "deform_rotation_deg" => self.deform_rotation_deg = p(value)?,
            "deform_translation" => self.deform_translation = p(value)?,
            "deform_amplitude" => self.deform_amplitude = p(value)?,
            "deform_grid" => self.deform_grid = p(value)?,
            "deform_domain" => self.deform_domain = p(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

fn split_line(raw: &str) -> Option<Result<(&str, &str), ()>> {
    let line = raw.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return None;
    }
    Some(match line.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim(), v.trim())),
        _ => Err(()),
    })
}

pub fn parse_config(text: &str) -> Result<Config, ConfigError> {
    let mut lines = Vec::new();
    let mut preset = Preset::Full;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let Some(kv) = split_line(raw) else { continue };
        let (key, value) = kv.map_err(|_| ConfigError::Syntax { line })?;
        if lines.iter().any(|(k, _, _)| *k == key) {
            return Err(ConfigError::Duplicate {
                key: key.to_string(),
                line,
            });
        }
        if key == "preset" {
            preset = value.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                line,
            })?;
        }
        lines.push((key, value, line));
    }
    let mut cfg = Config::preset(preset);
    for (key, value, line) in lines {
        match cfg.set(key, value) {
            Ok(true) => {}
            Ok(false) => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    line,
                })
            }
            Err(()) => {
                return Err(ConfigError::BadValue {
                    key: key.to_string(),
                    value: value.to_string(),
                    line,
                })
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_config(path: impl AsRef<Path>) -> Result<Config, ConfigError> {
    parse_config(&std::fs::read_to_string(path)?)
}
