//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment. Unknown keys are rejected so
//! that a typo never silently falls back to a default.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{DflatError, Result};
use crate::harness::{Optimizer, Task, TrainConfig};
use crate::model::{ModelConfig, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub variant: Variant,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk_default(),
            variant: Variant::DFlat,
            train: TrainConfig::default(),
        }
    }
}

/// Every accepted key, in the order `render` writes them.
pub const KEYS: &[&str] = &[
    "height",
    "width",
    "patch",
    "channels",
    "heads",
    "layers",
    "ffn_hidden",
    "group_pool",
    "groups",
    "pool_window",
    "interactive",
    "classes",
    "variant",
    "seed",
    "task",
    "noise",
    "steps",
    "batch_size",
    "learning_rate",
    "optimizer",
    "eval_every",
    "eval_size",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DflatError::config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    /// The gradient-check model: 3×3 encoder map decoded to 6×6.
    pub fn tiny() -> Self {
        RunConfig {
            model: ModelConfig::tiny(),
            ..RunConfig::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let a = &mut m.attention;
        let t = &mut self.train;
        match key {
            "height" => m.out_h = parse(key, value)?,
            "width" => m.out_w = parse(key, value)?,
            "patch" => m.patch = parse(key, value)?,
            "channels" => {
                let d: usize = parse(key, value)?;
                if a.ffn_hidden == 2 * a.d {
                    a.ffn_hidden = 2 * d;
                }
                a.d = d;
            }
            "heads" => a.heads = parse(key, value)?,
            "layers" => a.layers = parse(key, value)?,
            "ffn_hidden" => a.ffn_hidden = parse(key, value)?,
            "group_pool" => a.group_pool = parse(key, value)?,
            "groups" => a.groups = parse(key, value)?,
            "pool_window" => a.pool_window = parse(key, value)?,
            "interactive" => m.interactive = parse(key, value)?,
            "classes" => m.classes = parse(key, value)?,
            "variant" => self.variant = value.parse()?,
            "seed" => {
                let seed: u64 = parse(key, value)?;
                m.seed = seed;
                t.seed = seed;
            }
            "task" => t.task = value.parse()?,
            "noise" => t.noise = parse(key, value)?,
            "steps" => t.steps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "optimizer" => t.optimizer = value.parse::<Optimizer>()?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "eval_size" => t.eval_size = parse(key, value)?,
            other => return Err(DflatError::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` assignments from config text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DflatError::config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| DflatError::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DflatError::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| DflatError::config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    fn get(&self, key: &str) -> String {
        let m = &self.model;
        let a = &m.attention;
        let t = &self.train;
        match key {
            "height" => m.out_h.to_string(),
            "width" => m.out_w.to_string(),
            "patch" => m.patch.to_string(),
            "channels" => a.d.to_string(),
            "heads" => a.heads.to_string(),
            "layers" => a.layers.to_string(),
            "ffn_hidden" => a.ffn_hidden.to_string(),
            "group_pool" => a.group_pool.to_string(),
            "groups" => a.groups.to_string(),
            "pool_window" => a.pool_window.to_string(),
            "interactive" => m.interactive.to_string(),
            "classes" => m.classes.to_string(),
            "variant" => self.variant.to_string(),
            "seed" => m.seed.to_string(),
            "task" => t.task.to_string(),
            "noise" => format!("{:?}", t.noise),
            "steps" => t.steps.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "learning_rate" => format!("{:?}", t.learning_rate),
            "optimizer" => t.optimizer.to_string(),
            "eval_every" => t.eval_every.to_string(),
            "eval_size" => t.eval_size.to_string(),
            _ => unreachable!("key list and getter out of sync: {key}"),
        }
    }

    /// Fully resolved configuration in the same format `parse_text` reads.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.variant == Variant::DFlat {
            let a = &self.model.attention;
            a.validate_grouping(self.model.enc_h(), "row")?;
            a.validate_grouping(self.model.enc_w(), "column")?;
        }
        let (h, w, k) = (self.model.out_h, self.model.out_w, self.model.classes);
        match self.train.task {
            Task::Stripes if k > h + w - 1 => Err(DflatError::config(format!(
                "{k} stripe classes exceed the {} diagonals of a {h}x{w} image",
                h + w - 1
            ))),
            Task::Rects | Task::Checker if k > h * w / 4 => {
                Err(DflatError::config(format!("{k} classes do not fit in a {h}x{w} image")))
            }
            _ => Ok(()),
        }
    }
}
