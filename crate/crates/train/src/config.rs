//! Flat key=value run configuration. Every key has a documented default;
//! unknown keys are fatal so typos cannot silently fall back.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use saccade::loss::LossWeights;
use saccade::model::{ModelConfig, Variant};
use saccade::{Error, Result};
use saccade_data::{DataConfig, SUBSEQ_LEN};

/// Float width used for training and evaluation arithmetic. Checkpoints
/// store f64 either way; f32 values survive the round trip bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::config(format!(
                "precision must be f32 or f64, got {:?}",
                other
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: DataConfig,
    /// Base seed for dataset generation (gen-data).
    pub data_seed: u64,
    pub model: ModelConfig,
    /// Frames per training/evaluation window.
    pub window: usize,
    /// Windows averaged per sequence at evaluation.
    pub eval_windows: usize,
    pub lr: f64,
    pub batch: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    /// Seed for parameter init and the training loop's sampling.
    pub seed: u64,
    pub weights: LossWeights,
    /// Training windows pooled to estimate the initial distance metric.
    pub pretrain_items: usize,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            data_seed: 0,
            model: ModelConfig::default(),
            window: SUBSEQ_LEN,
            eval_windows: 5,
            lr: 1e-4,
            batch: 8,
            phase1_epochs: 5,
            phase2_epochs: 15,
            seed: 0,
            weights: LossWeights::default(),
            pretrain_items: 256,
            precision: Precision::F32,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("key {}: cannot parse {:?}: {}", key, value, e)))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!(
            "key {}: expected true or false, got {:?}",
            key, value
        ))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|p| parse(key, p.trim()))
        .collect()
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data.height" => self.data.height = parse(key, value)?,
            "data.width" => self.data.width = parse(key, value)?,
            "data.frames" => self.data.frames = parse(key, value)?,
            "data.entities" => self.data.entities = parse(key, value)?,
            "data.train" => self.data.train = parse(key, value)?,
            "data.val" => self.data.val = parse(key, value)?,
            "data.test" => self.data.test = parse(key, value)?,
            "data.seed" => self.data_seed = parse(key, value)?,
            "model.variant" => {
                self.model.variant = value
                    .parse::<Variant>()
                    .map_err(|e| Error::config(e.to_string()))?
            }
            "backbone.channels" => self.model.backbone.channels = parse_list(key, value)?,
            "attention.hidden" => self.model.attention.hidden = parse(key, value)?,
            "attention.glimpses" => self.model.attention.glimpses = parse(key, value)?,
            "attention.s_min" => self.model.attention.s_min = parse(key, value)?,
            "attention.s_max" => self.model.attention.s_max = parse(key, value)?,
            "attention.tie_scales" => self.model.attention.tie_scales = parse_bool(key, value)?,
            "attention.crop" => self.model.attention.crop = parse(key, value)?,
            "attention.embed_hidden" => {
                self.model.attention.loc_embed_hidden = parse(key, value)?
            }
            "workers.count" => self.model.workers.workers = parse(key, value)?,
            "workers.hidden" => self.model.workers.hidden = parse(key, value)?,
            "memory.capacity" => self.model.workers.capacity = parse(key, value)?,
            "memory.alpha" => self.model.workers.alpha = parse(key, value)?,
            "memory.lambda_decay" => self.model.workers.lambda_decay = parse(key, value)?,
            "memory.pretrain_items" => self.pretrain_items = parse(key, value)?,
            "window.frames" => self.window = parse(key, value)?,
            "eval.windows" => self.eval_windows = parse(key, value)?,
            "train.lr" => self.lr = parse(key, value)?,
            "train.batch" => self.batch = parse(key, value)?,
            "train.phase1_epochs" => self.phase1_epochs = parse(key, value)?,
            "train.phase2_epochs" => self.phase2_epochs = parse(key, value)?,
            "train.seed" => self.seed = parse(key, value)?,
            "train.precision" => self.precision = value.parse()?,
            "loss.classify" => self.weights.classify = parse(key, value)?,
            "loss.pose" => self.weights.pose = parse(key, value)?,
            "loss.spread" => self.weights.spread = parse(key, value)?,
            "loss.anchor" => self.weights.anchor = parse(key, value)?,
            other => {
                return Err(Error::config(format!("unknown config key {:?}", other)));
            }
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment, blank lines skipped.
    pub fn parse_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key=value, got {:?}", lineno + 1, raw))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.finalize()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {}", path.display(), e)))?;
        Self::parse_text(&text)
    }

    /// Ties the dependent fields together and validates everything.
    pub fn finalize(&mut self) -> Result<()> {
        self.model.classes = saccade_data::CLASS_NAMES.len();
        self.model.joints = self.data.entities;
        self.data.validate()?;
        self.model.validate()?;
        self.weights
            .validate()
            .map_err(|e| Error::config(e.to_string()))?;
        if self.window == 0 || self.window > self.data.frames {
            return Err(Error::config(format!(
                "window.frames={} does not fit data.frames={}",
                self.window, self.data.frames
            )));
        }
        if self.eval_windows == 0 {
            return Err(Error::config("eval.windows must be positive".to_string()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("train.lr must be > 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::config("train.batch must be positive".to_string()));
        }
        Ok(())
    }

    /// Canonical echo of every key at its resolved value. Parsing this text
    /// back reproduces the config.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let channels: Vec<String> = self
            .model
            .backbone
            .channels
            .iter()
            .map(|c| c.to_string())
            .collect();
        let _ = writeln!(s, "data.height={}", self.data.height);
        let _ = writeln!(s, "data.width={}", self.data.width);
        let _ = writeln!(s, "data.frames={}", self.data.frames);
        let _ = writeln!(s, "data.entities={}", self.data.entities);
        let _ = writeln!(s, "data.train={}", self.data.train);
        let _ = writeln!(s, "data.val={}", self.data.val);
        let _ = writeln!(s, "data.test={}", self.data.test);
        let _ = writeln!(s, "data.seed={}", self.data_seed);
        let _ = writeln!(s, "model.variant={}", self.model.variant);
        let _ = writeln!(s, "backbone.channels={}", channels.join(","));
        let _ = writeln!(s, "attention.hidden={}", self.model.attention.hidden);
        let _ = writeln!(s, "attention.glimpses={}", self.model.attention.glimpses);
        let _ = writeln!(s, "attention.s_min={}", self.model.attention.s_min);
        let _ = writeln!(s, "attention.s_max={}", self.model.attention.s_max);
        let _ = writeln!(s, "attention.tie_scales={}", self.model.attention.tie_scales);
        let _ = writeln!(s, "attention.crop={}", self.model.attention.crop);
        let _ = writeln!(
            s,
            "attention.embed_hidden={}",
            self.model.attention.loc_embed_hidden
        );
        let _ = writeln!(s, "workers.count={}", self.model.workers.workers);
        let _ = writeln!(s, "workers.hidden={}", self.model.workers.hidden);
        let _ = writeln!(s, "memory.capacity={}", self.model.workers.capacity);
        let _ = writeln!(s, "memory.alpha={}", self.model.workers.alpha);
        let _ = writeln!(s, "memory.lambda_decay={}", self.model.workers.lambda_decay);
        let _ = writeln!(s, "memory.pretrain_items={}", self.pretrain_items);
        let _ = writeln!(s, "window.frames={}", self.window);
        let _ = writeln!(s, "eval.windows={}", self.eval_windows);
        let _ = writeln!(s, "train.lr={}", self.lr);
        let _ = writeln!(s, "train.batch={}", self.batch);
        let _ = writeln!(s, "train.phase1_epochs={}", self.phase1_epochs);
        let _ = writeln!(s, "train.phase2_epochs={}", self.phase2_epochs);
        let _ = writeln!(s, "train.seed={}", self.seed);
        let _ = writeln!(s, "train.precision={}", self.precision.as_str());
        let _ = writeln!(s, "loss.classify={}", self.weights.classify);
        let _ = writeln!(s, "loss.pose={}", self.weights.pose);
        let _ = writeln!(s, "loss.spread={}", self.weights.spread);
        let _ = writeln!(s, "loss.anchor={}", self.weights.anchor);
        s
    }
}
