//! Model, loss and training hyperparameters plus the flat `key=value` text
//! form used by config files and checkpoint headers.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How consecutive windows of `k` rows are fused into one segment feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FusionMode {
    Max,
    #[default]
    Avg,
    Conv,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(FusionMode::Max),
            "avg" => Ok(FusionMode::Avg),
            "conv" => Ok(FusionMode::Conv),
            other => Err(Error::config(format!(
                "unknown fusion mode `{other}` (expected max, avg or conv)"
            ))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Max => "max",
            FusionMode::Avg => "avg",
            FusionMode::Conv => "conv",
        })
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Per-frame input feature width.
    pub input_dim: usize,
    /// Model width `D`.
    pub model_dim: usize,
    /// Number of phase classes `C`.
    pub num_classes: usize,
    /// Number of segment levels `M`.
    pub depth: usize,
    /// Fusion window and stride `k`.
    pub fusion_kernel: usize,
    /// Residual blocks in the frame encoder.
    pub frame_layers: usize,
    /// Residual blocks per segment level.
    pub segment_layers: usize,
    pub heads: usize,
    pub fusion: FusionMode,
    pub dropout: f64,
    /// Positional table capacity `T_max`.
    pub max_len: usize,
    pub causal_attention: bool,
    /// Width of the dilated convolution kernel in every residual block.
    pub kernel_width: usize,
    /// Hidden width of the transformer feed-forward network.
    pub ffn_dim: usize,
    /// Build the segment hierarchy (and its losses). Off gives the frame-only baseline.
    pub hierarchy: bool,
    /// Refine frames with segment-frame attention. Requires `hierarchy`.
    pub attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 2048,
            model_dim: 64,
            num_classes: 7,
            depth: 3,
            fusion_kernel: 7,
            frame_layers: 11,
            segment_layers: 10,
            heads: 4,
            fusion: FusionMode::Avg,
            dropout: 0.5,
            max_len: 10_000,
            causal_attention: true,
            kernel_width: 3,
            ffn_dim: 256,
            hierarchy: true,
            attention: true,
        }
    }
}

impl ModelConfig {
    /// Model with width `d` and the feed-forward width tied to `4 * d`.
    pub fn with_model_dim(mut self, d: usize) -> Self {
        self.model_dim = d;
        self.ffn_dim = 4 * d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.D_in", self.input_dim),
            ("model.D", self.model_dim),
            ("model.N_head", self.heads),
            ("model.T_max", self.max_len),
            ("model.kernel_width", self.kernel_width),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{key} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "model.C must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "model.D={} is not divisible by model.N_head={}",
                self.model_dim, self.heads
            )));
        }
        if self.ffn_dim < self.model_dim {
            return Err(Error::config("model.D_ff must be at least model.D"));
        }
        if self.hierarchy {
            if self.depth < 1 {
                return Err(Error::config("model.M must be at least 1"));
            }
            if self.fusion_kernel < 2 {
                return Err(Error::config("model.k must be at least 2"));
            }
        }
        if self.attention && !self.hierarchy {
            return Err(Error::config("model.attention requires model.hierarchy"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Segment levels actually built by this configuration.
    pub fn levels(&self) -> usize {
        if self.hierarchy {
            self.depth
        } else {
            0
        }
    }

    /// Width of the fused frame representation fed to the frame head.
    pub fn fused_dim(&self) -> usize {
        if self.attention {
            (self.depth + 1) * self.model_dim
        } else {
            self.model_dim
        }
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("model.D_in", self.input_dim.to_string()),
            ("model.D", self.model_dim.to_string()),
            ("model.C", self.num_classes.to_string()),
            ("model.M", self.depth.to_string()),
            ("model.k", self.fusion_kernel.to_string()),
            ("model.L_frame", self.frame_layers.to_string()),
            ("model.L_seg", self.segment_layers.to_string()),
            ("model.N_head", self.heads.to_string()),
            ("model.fusion", self.fusion.to_string()),
            ("model.dropout", self.dropout.to_string()),
            ("model.T_max", self.max_len.to_string()),
            ("model.causal_attention", self.causal_attention.to_string()),
            ("model.kernel_width", self.kernel_width.to_string()),
            ("model.D_ff", self.ffn_dim.to_string()),
            ("model.hierarchy", self.hierarchy.to_string()),
            ("model.attention", self.attention.to_string()),
        ];
        kv.drain(..).map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Applies one `model.*` key. Returns `Ok(false)` for keys it does not own.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "model.D_in" => self.input_dim = parse(key, value)?,
            "model.D" => self.model_dim = parse(key, value)?,
            "model.C" => self.num_classes = parse(key, value)?,
            "model.M" => self.depth = parse(key, value)?,
            "model.k" => self.fusion_kernel = parse(key, value)?,
            "model.L_frame" => self.frame_layers = parse(key, value)?,
            "model.L_seg" => self.segment_layers = parse(key, value)?,
            "model.N_head" => self.heads = parse(key, value)?,
            "model.fusion" => self.fusion = value.parse()?,
            "model.dropout" => self.dropout = parse(key, value)?,
            "model.T_max" => self.max_len = parse(key, value)?,
            "model.causal_attention" => self.causal_attention = parse(key, value)?,
            "model.kernel_width" => self.kernel_width = parse(key, value)?,
            "model.D_ff" => self.ffn_dim = parse(key, value)?,
            "model.hierarchy" => self.hierarchy = parse(key, value)?,
            "model.attention" => self.attention = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Weights of the hierarchical consistency objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Segment-level weight `β`.
    pub beta: f64,
    /// Smoothing weight `λ`.
    pub lambda: f64,
    /// Floor applied to probabilities before the log.
    pub log_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lambda: 1.0,
            log_floor: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::config("loss.beta and loss.lambda must be non-negative"));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::config("loss.log_floor must be positive"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("loss.beta".into(), self.beta.to_string()),
            ("loss.lambda".into(), self.lambda.to_string()),
            ("loss.log_floor".into(), self.log_floor.to_string()),
        ]
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "loss.beta" => self.beta = parse(key, value)?,
            "loss.lambda" => self.lambda = parse(key, value)?,
            "loss.log_floor" => self.log_floor = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Optimizer, schedule and run-level settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Epochs between learning-rate decays.
    pub decay_every: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Optional global gradient-norm clip.
    pub clip_norm: Option<f64>,
    pub model: ModelConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            decay_every: 30,
            decay_factor: 0.1,
            epochs: 100,
            seed: 0,
            clip_norm: None,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::config("train.lr must be positive"));
        }
        if self.decay_every == 0 || self.epochs == 0 {
            return Err(Error::config("train.decay_every and train.epochs must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("train.decay_factor must lie in (0, 1]"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("train.clip_norm must be positive"));
            }
        }
        self.model.validate()?;
        self.loss.validate()
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("train.lr".to_string(), self.base_lr.to_string()),
            ("train.decay_every".to_string(), self.decay_every.to_string()),
            ("train.decay_factor".to_string(), self.decay_factor.to_string()),
            ("train.epochs".to_string(), self.epochs.to_string()),
            ("train.seed".to_string(), self.seed.to_string()),
            (
                "train.clip_norm".to_string(),
                self.clip_norm.map_or_else(|| "none".to_string(), |c| c.to_string()),
            ),
        ];
        kv.extend(self.model.to_kv());
        kv.extend(self.loss.to_kv());
        kv
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "train.lr" => self.base_lr = parse(key, value)?,
            "train.decay_every" => self.decay_every = parse(key, value)?,
            "train.decay_factor" => self.decay_factor = parse(key, value)?,
            "train.epochs" => self.epochs = parse(key, value)?,
            "train.seed" => self.seed = parse(key, value)?,
            "train.clip_norm" => {
                self.clip_norm = match value {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            _ => return Ok(self.model.apply(key, value)? || self.loss.apply(key, value)?),
        }
        Ok(true)
    }
}

impl TrainConfig {
    /// Applies every pair, rejecting keys no section owns. Setting `model.D`
    /// without `model.D_ff` keeps the feed-forward width at `4 * D`.
    pub fn apply_all(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            if !self.apply(k, v)? {
                return Err(Error::config(format!("unknown key `{k}`")));
            }
        }
        if kv.contains_key("model.D") && !kv.contains_key("model.D_ff") {
            self.model.ffn_dim = 4 * self.model.model_dim;
        }
        Ok(())
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_all(kv)?;
        Ok(cfg)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse `{value}`")))
}

/// Parses flat `key=value` text. Blank lines and `#` comments are skipped;
/// later keys override earlier ones.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn format_kv(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}
