//! Run configuration and its `key=value` text form.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::fusion::MeanAxis;
use crate::graph::RecurrentCell;
use crate::model::MAX_MODULES;
use crate::optim::SgdConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub frames: usize,
    pub dim: usize,
    pub classes: usize,
    pub module_count: usize,
    pub use_weighted_fusion: bool,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub fusion_mean_axis: MeanAxis,
    pub cell: RecurrentCell,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            dim: 32,
            classes: 6,
            module_count: 2,
            use_weighted_fusion: true,
            epochs: 40,
            learning_rate: SgdConfig::DEFAULT_LEARNING_RATE,
            weight_decay: SgdConfig::DEFAULT_WEIGHT_DECAY,
            batch_size: 8,
            seed: 0,
            dataset: None,
            output: None,
            fusion_mean_axis: MeanAxis::Column,
            cell: RecurrentCell::Gateless,
        }
    }
}

/// Keys accepted by [`RunConfig::set`], in documentation order.
pub const KEYS: &[&str] = &[
    "N",
    "d",
    "K",
    "module_count",
    "use_weighted_fusion",
    "epochs",
    "learning_rate",
    "weight_decay",
    "batch_size",
    "seed",
    "dataset",
    "output",
    "fusion_mean_axis",
    "cell",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for {key}"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "N" => self.frames = parse_num(key, value)?,
            "d" => self.dim = parse_num(key, value)?,
            "K" => self.classes = parse_num(key, value)?,
            "module_count" => self.module_count = parse_num(key, value)?,
            "use_weighted_fusion" => self.use_weighted_fusion = parse_bool(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "output" => self.output = Some(PathBuf::from(value)),
            "fusion_mean_axis" => self.fusion_mean_axis = MeanAxis::parse(value)?,
            "cell" => self.cell = RecurrentCell::parse(value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "N={}\nd={}\nK={}\nmodule_count={}\nuse_weighted_fusion={}\nepochs={}\n\
             learning_rate={}\nweight_decay={}\nbatch_size={}\nseed={}\n\
             fusion_mean_axis={}\ncell={}\n",
            self.frames,
            self.dim,
            self.classes,
            self.module_count,
            self.use_weighted_fusion,
            self.epochs,
            self.learning_rate,
            self.weight_decay,
            self.batch_size,
            self.seed,
            self.fusion_mean_axis.name(),
            self.cell.name(),
        );
        if let Some(p) = &self.dataset {
            out.push_str(&format!("dataset={}\n", p.display()));
        }
        if let Some(p) = &self.output {
            out.push_str(&format!("output={}\n", p.display()));
        }
        out
    }

    pub fn sgd(&self) -> Result<SgdConfig> {
        SgdConfig::frozen_allowed(self.learning_rate, self.weight_decay)
    }

    pub fn validate(&self) -> Result<()> {
        if self.module_count > MAX_MODULES {
            return Err(Error::Config(format!(
                "module_count must be 0..={MAX_MODULES}, got {}",
                self.module_count
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.frames == 0 || self.classes < 2 {
            return Err(Error::Config("need N >= 1 and K >= 2".into()));
        }
        if self.dim == 0 || (self.module_count > 0 && !self.dim.is_multiple_of(2)) {
            return Err(Error::Config(format!(
                "d must be positive and even, got {}",
                self.dim
            )));
        }
        self.sgd()?;
        Ok(())
    }
}
