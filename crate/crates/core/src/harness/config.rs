//! Run configuration: `key=value` files with `DPVQA_` environment overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::Variant;
use crate::params::fnv1a;
use crate::synth::Task;
use crate::tensor::Precision;

pub const ENV_PREFIX: &str = "DPVQA_";

/// Learning rates used when `lr` is not set.
pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_COUNT_LR: f64 = 5e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    /// L
    pub clips: usize,
    /// T
    pub clip_len: usize,
    /// K
    pub max_order: usize,
    /// d
    pub dim: usize,
    /// P
    pub steps: usize,
    pub embed_dim: usize,
    /// Frames sampled by the average-pooling and frame-level relation baselines.
    pub frames: usize,
    pub subset_cap: usize,
    pub max_len: usize,
    pub lr: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Empty means every task.
    pub tasks: Vec<Task>,
    /// Maximum items per split; 0 keeps all.
    pub limit: usize,
    pub grad_clip: Option<f64>,
    pub weight_decay: f64,
    pub dropout: f64,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::CrnMac,
            clips: 5,
            clip_len: 8,
            max_order: 4,
            dim: 512,
            steps: 12,
            embed_dim: 300,
            frames: 8,
            subset_cap: 32,
            max_len: 32,
            lr: None,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            precision: Precision::F32,
            corpus: None,
            out: None,
            tasks: Vec::new(),
            limit: 0,
            grad_clip: None,
            weight_decay: 0.0,
            dropout: 0.0,
            workers: 2,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn optional_f64(key: &str, v: &str) -> Result<Option<f64>> {
    match v {
        "" | "none" | "off" => Ok(None),
        _ => parse(key, v).map(Some),
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 23] = [
        "variant",
        "clips",
        "clip_len",
        "max_order",
        "dim",
        "steps",
        "embed_dim",
        "frames",
        "subset_cap",
        "max_len",
        "lr",
        "batch_size",
        "epochs",
        "seed",
        "precision",
        "corpus",
        "out",
        "tasks",
        "limit",
        "grad_clip",
        "weight_decay",
        "dropout",
        "workers",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "variant" => self.variant = v.parse()?,
            "clips" => self.clips = parse(key, v)?,
            "clip_len" => self.clip_len = parse(key, v)?,
            "max_order" => self.max_order = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "frames" => self.frames = parse(key, v)?,
            "subset_cap" => self.subset_cap = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "lr" => self.lr = optional_f64(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "precision" => self.precision = v.parse()?,
            "corpus" => self.corpus = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out" => self.out = (!v.is_empty()).then(|| PathBuf::from(v)),
            "tasks" => {
                self.tasks = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty() && *s != "all")
                    .map(Task::from_str)
                    .collect::<Result<_>>()?
            }
            "limit" => self.limit = parse(key, v)?,
            "grad_clip" => self.grad_clip = optional_f64(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    /// Applies `DPVQA_<KEY>` overrides from `vars`.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        for (k, v) in vars {
            if let Some(key) = k.strip_prefix(ENV_PREFIX) {
                let key = key.to_ascii_lowercase();
                if Self::KEYS.contains(&key.as_str()) {
                    self.set(&key, &v)?;
                }
            }
        }
        Ok(())
    }

    pub fn with_env(mut self) -> Result<Self> {
        self.apply_env(std::env::vars())?;
        Ok(self)
    }

    /// Learning rate in effect: explicit, else the counting rate for count-only runs.
    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or(if self.tasks == [Task::RepetitionCount] {
            DEFAULT_COUNT_LR
        } else {
            DEFAULT_LR
        })
    }

    /// Clip length actually used; the frame-level relation variant uses single frames.
    pub fn effective_clip_len(&self) -> usize {
        if self.variant == Variant::TrnMac {
            1
        } else {
            self.clip_len
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return err("steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if self.dim == 0 || self.dim % 2 != 0 {
            return err(format!("dim {} must be positive and even", self.dim));
        }
        if self.clips == 0 || self.clip_len == 0 || self.frames == 0 || self.embed_dim == 0 {
            return err("clips, clip_len, frames and embed_dim must be positive".into());
        }
        if self.variant.uses_crn() {
            let clips = if self.variant == Variant::TrnMac { self.frames } else { self.clips };
            if self.max_order < 2 || self.max_order > clips {
                return err(format!("max_order {} must lie in 2..={clips}", self.max_order));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.subset_cap == 0 {
            return err("subset_cap must be positive".into());
        }
        Ok(())
    }

    /// Canonical `key=value` text; identical configs give identical text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |x: Option<f64>| x.map_or("none".to_string(), |v| v.to_string());
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let tasks = self.tasks.iter().map(|t| t.name()).collect::<Vec<_>>().join(",");
        let fields: BTreeMap<&str, String> = [
            ("variant", self.variant.name().to_string()),
            ("clips", self.clips.to_string()),
            ("clip_len", self.clip_len.to_string()),
            ("max_order", self.max_order.to_string()),
            ("dim", self.dim.to_string()),
            ("steps", self.steps.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("frames", self.frames.to_string()),
            ("subset_cap", self.subset_cap.to_string()),
            ("max_len", self.max_len.to_string()),
            ("lr", opt(self.lr)),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("precision", self.precision.to_string()),
            ("corpus", path(&self.corpus)),
            ("out", path(&self.out)),
            ("tasks", tasks),
            ("limit", self.limit.to_string()),
            ("grad_clip", opt(self.grad_clip)),
            ("weight_decay", self.weight_decay.to_string()),
            ("dropout", self.dropout.to_string()),
            ("workers", self.workers.to_string()),
        ]
        .into_iter()
        .collect();
        for (k, v) in fields {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Hash of the settings that shape the parameters; paths and schedule are excluded.
    pub fn model_hash(&self) -> u64 {
        let text = format!(
            "{}|{}|{}|{}|{}|{}|{}|{}",
            self.variant.name(),
            self.clips,
            self.effective_clip_len(),
            self.max_order,
            self.dim,
            self.steps,
            self.embed_dim,
            self.frames
        );
        fnv1a(text.as_bytes())
    }
}
