//! Flat `key=value` configuration shared by every command. Unknown keys
//! are rejected and every value is range-checked on load; flags override
//! file values, and the effective configuration is echoed into output
//! directories for provenance.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::ssl::{ComposeConfig, PaintConfig, PaintParams};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainParams {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub compose: ComposeConfig,
    pub augment: AugmentConfig,
    pub train: TrainParams,
    pub pretrain: PretrainParams,
    pub folds: usize,
    pub runs: usize,
    pub holdout_frac: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model: ModelConfig::default(),
            compose: ComposeConfig::default(),
            augment: AugmentConfig::default(),
            train: TrainParams {
                epochs: 30,
                lr: 0.01,
                momentum: 0.9,
            },
            pretrain: PretrainParams {
                steps: 500,
                batch: 4,
                lr: 0.01,
                momentum: 0.9,
            },
            folds: 10,
            runs: 1,
            holdout_frac: 0.1,
        }
    }
}

impl Config {
    /// Parses a config file: one `key=value` per line, `#` comments and
    /// blank lines allowed. Values not present keep their defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Config::default();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", idx + 1))
            })?;
            config.apply(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Sets one key. Unknown keys are a config error.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("malformed value {value:?} for key {key}")))
        }
        match key {
            "model.input_side" => self.model.encoder.input_side = parse(key, value)?,
            "model.channels" => {
                self.model.encoder.channels = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<Vec<usize>>>()?;
            }
            "model.feature_dim" => self.model.encoder.feature_dim = parse(key, value)?,
            "model.attention_hidden" => self.model.attention.hidden = parse(key, value)?,
            "model.attention_rows" => self.model.attention.rows = parse(key, value)?,
            "model.classifier_hidden" => self.model.classifier_hidden = parse(key, value)?,
            "transform.nonlinear_prob" => self.compose.nonlinear_prob = parse(key, value)?,
            "transform.shuffle_prob" => self.compose.shuffle_prob = parse(key, value)?,
            "transform.shuffle_window_w" => self.compose.shuffle_window.0 = parse(key, value)?,
            "transform.shuffle_window_h" => self.compose.shuffle_window.1 = parse(key, value)?,
            "transform.paint_enabled" => {
                let enabled: bool = parse(key, value)?;
                if enabled && self.compose.paint.is_none() {
                    self.compose.paint = Some(PaintConfig {
                        in_paint_prob: 0.8,
                        params: PaintParams::default(),
                    });
                } else if !enabled {
                    self.compose.paint = None;
                }
            }
            "transform.inpaint_prob" => {
                self.paint_mut().in_paint_prob = parse(key, value)?;
            }
            "transform.paint_min_rects" => {
                self.paint_mut().params.min_rects = parse(key, value)?;
            }
            "transform.paint_max_rects" => {
                self.paint_mut().params.max_rects = parse(key, value)?;
            }
            "transform.paint_min_frac" => {
                self.paint_mut().params.min_side_frac = parse(key, value)?;
            }
            "transform.paint_max_frac" => {
                self.paint_mut().params.max_side_frac = parse(key, value)?;
            }
            "augment.max_rotation_deg" => self.augment.max_rotation_deg = parse(key, value)?,
            "augment.flip_prob" => self.augment.flip_prob = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.momentum" => self.train.momentum = parse(key, value)?,
            "pretrain.steps" => self.pretrain.steps = parse(key, value)?,
            "pretrain.batch" => self.pretrain.batch = parse(key, value)?,
            "pretrain.lr" => self.pretrain.lr = parse(key, value)?,
            "pretrain.momentum" => self.pretrain.momentum = parse(key, value)?,
            "eval.folds" => self.folds = parse(key, value)?,
            "eval.runs" => self.runs = parse(key, value)?,
            "eval.holdout_frac" => self.holdout_frac = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    fn paint_mut(&mut self) -> &mut PaintConfig {
        self.compose.paint.get_or_insert_with(|| PaintConfig {
            in_paint_prob: 0.8,
            params: PaintParams::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.compose.validate()?;
        self.augment.validate()?;
        for (name, lr, momentum) in [
            ("train", self.train.lr, self.train.momentum),
            ("pretrain", self.pretrain.lr, self.pretrain.momentum),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name}.lr must be positive")));
            }
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::Config(format!("{name}.momentum must be in [0, 1)")));
            }
        }
        if self.pretrain.batch == 0 {
            return Err(Error::Config("pretrain.batch must be >= 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("eval.folds must be >= 2".into()));
        }
        if self.runs == 0 {
            return Err(Error::Config("eval.runs must be >= 1".into()));
        }
        if !(self.holdout_frac > 0.0 && self.holdout_frac < 1.0) {
            return Err(Error::Config("eval.holdout_frac must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// The effective configuration in the same `key=value` format the
    /// loader accepts.
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        let channels: Vec<String> = self
            .model
            .encoder
            .channels
            .iter()
            .map(|c| c.to_string())
            .collect();
        let _ = writeln!(out, "model.input_side={}", self.model.encoder.input_side);
        let _ = writeln!(out, "model.channels={}", channels.join(","));
        let _ = writeln!(out, "model.feature_dim={}", self.model.encoder.feature_dim);
        let _ = writeln!(out, "model.attention_hidden={}", self.model.attention.hidden);
        let _ = writeln!(out, "model.attention_rows={}", self.model.attention.rows);
        let _ = writeln!(out, "model.classifier_hidden={}", self.model.classifier_hidden);
        let _ = writeln!(out, "transform.nonlinear_prob={}", self.compose.nonlinear_prob);
        let _ = writeln!(out, "transform.shuffle_prob={}", self.compose.shuffle_prob);
        let _ = writeln!(out, "transform.shuffle_window_w={}", self.compose.shuffle_window.0);
        let _ = writeln!(out, "transform.shuffle_window_h={}", self.compose.shuffle_window.1);
        let _ = writeln!(out, "transform.paint_enabled={}", self.compose.paint.is_some());
        if let Some(paint) = &self.compose.paint {
            let _ = writeln!(out, "transform.inpaint_prob={}", paint.in_paint_prob);
            let _ = writeln!(out, "transform.paint_min_rects={}", paint.params.min_rects);
            let _ = writeln!(out, "transform.paint_max_rects={}", paint.params.max_rects);
            let _ = writeln!(out, "transform.paint_min_frac={}", paint.params.min_side_frac);
            let _ = writeln!(out, "transform.paint_max_frac={}", paint.params.max_side_frac);
        }
        let _ = writeln!(out, "augment.max_rotation_deg={}", self.augment.max_rotation_deg);
        let _ = writeln!(out, "augment.flip_prob={}", self.augment.flip_prob);
        let _ = writeln!(out, "train.epochs={}", self.train.epochs);
        let _ = writeln!(out, "train.lr={}", self.train.lr);
        let _ = writeln!(out, "train.momentum={}", self.train.momentum);
        let _ = writeln!(out, "pretrain.steps={}", self.pretrain.steps);
        let _ = writeln!(out, "pretrain.batch={}", self.pretrain.batch);
        let _ = writeln!(out, "pretrain.lr={}", self.pretrain.lr);
        let _ = writeln!(out, "pretrain.momentum={}", self.pretrain.momentum);
        let _ = writeln!(out, "eval.folds={}", self.folds);
        let _ = writeln!(out, "eval.runs={}", self.runs);
        let _ = writeln!(out, "eval.holdout_frac={}", self.holdout_frac);
        out
    }
}
