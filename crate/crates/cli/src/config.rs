//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! preset = desk          # or `paper`; applied before every other key
//! hidden = 32
//! epochs = 20,40,5,5,5
//! lambda = 1,2,4,8
//! ```
//!
//! Keys are the fields of [`FlowConfig`] and [`TrainConfig`].

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use iodf::train::TrainConfig;
use iodf::FlowConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub flow: FlowConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { flow: FlowConfig::desk(), train: TrainConfig::desk() }
    }
}

#[derive(Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config line {}: {}", self.line, self.msg)
    }
}

impl std::error::Error for ConfigError {}

fn scalar<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',').map(|s| scalar(s.trim())).collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError { line: i + 1, msg: format!("expected key = value, got {line:?}") })?;
            pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = RunConfig::default();
        if let Some((line, _, v)) = pairs.iter().rev().find(|(_, k, _)| k == "preset") {
            cfg = match v.as_str() {
                "desk" => RunConfig::default(),
                "paper" => RunConfig { flow: FlowConfig::imagenet32(), train: TrainConfig::default() },
                _ => return Err(ConfigError { line: *line, msg: format!("unknown preset {v:?}") }),
            };
        }
        for (line, k, v) in &pairs {
            cfg.set(k, v).map_err(|msg| ConfigError { line: *line, msg })?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let (f, t) = (&mut self.flow, &mut self.train);
        match key {
            "preset" => {}
            "channels" => f.channels = scalar(v)?,
            "height" => f.height = scalar(v)?,
            "width" => f.width = scalar(v)?,
            "levels" => f.levels = scalar(v)?,
            "couplings" => f.couplings = scalar(v)?,
            "hidden" => f.hidden = scalar(v)?,
            "blocks" => f.blocks = scalar(v)?,
            "prior_blocks" => f.prior_blocks = scalar(v)?,
            "lr" => t.lr = scalar(v)?,
            "lr_decay" => t.lr_decay = scalar(v)?,
            "gate_lr" => t.gate_lr = scalar(v)?,
            "prune_lr" => t.prune_lr = scalar(v)?,
            "quant_lr" => t.quant_lr = scalar(v)?,
            "epochs" => {
                let e: Vec<usize> = list(v)?;
                t.epochs = e.try_into().map_err(|e: Vec<usize>| format!("epochs needs 5 values, got {}", e.len()))?;
            }
            "batch" => t.batch = scalar(v)?,
            "lambda" => t.lambda = list(v)?,
            "lambda_scale" => t.lambda_scale = scalar(v)?,
            "alpha" => t.alpha = scalar(v)?,
            "r_target" => t.r_target = scalar(v)?,
            "patience" => t.patience = scalar(v)?,
            "min_delta" => t.min_delta = scalar(v)?,
            "calib_images" => t.calib_images = scalar(v)?,
            "seed" => t.seed = scalar(v)?,
            "checkpoint_dir" => t.checkpoint_dir = Some(PathBuf::from(v)),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }
}
