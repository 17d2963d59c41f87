//! Run configuration: named presets, `key = value` files and overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use msa_core::attention::AttentionMode;
use msa_core::model::{LossWeights, ModelConfig, TrainSettings};
use msa_core::optim::AdamConfig;

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "MSA_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub d_model: usize,
    pub d_bilinear: usize,
    pub d_channel: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub memory_slots: usize,
    pub concepts: usize,
    /// Encoder layer read by the concept head; 0 means the last one.
    pub tap_layer: usize,
    pub attention: AttentionMode,
    pub use_concepts: bool,

    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lambda_ce: f64,
    pub lambda_mlc: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
    pub min_freq: usize,

    pub beam_width: usize,
    pub max_len: usize,

    pub features: Option<PathBuf>,
    pub reports: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub concept_vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl RunConfig {
    /// Small CPU configuration used for the synthetic task.
    pub fn desk() -> Self {
        RunConfig {
            d_model: 32,
            d_bilinear: 32,
            d_channel: 32,
            heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            memory_slots: 3,
            concepts: 32,
            tap_layer: 0,
            attention: AttentionMode::SparseRelu,
            use_concepts: true,
            lr: 3e-3,
            batch_size: 8,
            epochs: 30,
            seed: 1,
            lambda_ce: 1.0,
            lambda_mlc: 5.0,
            clip_norm: 5.0,
            min_freq: 5,
            beam_width: 3,
            max_len: 100,
            features: None,
            reports: None,
            vocab: None,
            concept_vocab: None,
            checkpoint: None,
            log: None,
        }
    }

    /// Full-size settings for 768-wide region features.
    pub fn paper() -> Self {
        RunConfig {
            d_model: 768,
            d_bilinear: 768,
            d_channel: 768,
            heads: 8,
            encoder_layers: 6,
            decoder_layers: 6,
            memory_slots: 3,
            concepts: 768,
            lr: 5e-5,
            batch_size: 32,
            epochs: 60,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(CliError::Usage(format!("unknown preset `{name}` (expected desk or paper)"))),
        }
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("invalid value `{v}`"))
        }
        fn path(v: &str) -> Option<PathBuf> {
            (!v.is_empty()).then(|| PathBuf::from(v))
        }
        match key {
            "d_model" => self.d_model = num(value)?,
            "d_bilinear" => self.d_bilinear = num(value)?,
            "d_channel" => self.d_channel = num(value)?,
            "heads" => self.heads = num(value)?,
            "encoder_layers" => self.encoder_layers = num(value)?,
            "decoder_layers" => self.decoder_layers = num(value)?,
            "memory_slots" => self.memory_slots = num(value)?,
            "concepts" => self.concepts = num(value)?,
            "tap_layer" => self.tap_layer = num(value)?,
            "attention" => {
                self.attention = match value {
                    "sparse" => AttentionMode::SparseRelu,
                    "softmax" => AttentionMode::SoftmaxBaseline,
                    _ => return Err(format!("attention must be sparse or softmax, got `{value}`")),
                }
            }
            "use_concepts" => self.use_concepts = num(value)?,
            "lr" => self.lr = num(value)?,
            "batch_size" => self.batch_size = num(value)?,
            "epochs" => self.epochs = num(value)?,
            "seed" => self.seed = num(value)?,
            "lambda_ce" => self.lambda_ce = num(value)?,
            "lambda_mlc" => self.lambda_mlc = num(value)?,
            "clip_norm" => self.clip_norm = num(value)?,
            "min_freq" => self.min_freq = num(value)?,
            "beam_width" => self.beam_width = num(value)?,
            "max_len" => self.max_len = num(value)?,
            "features" => self.features = path(value),
            "reports" => self.reports = path(value),
            "vocab" => self.vocab = path(value),
            "concept_vocab" => self.concept_vocab = path(value),
            "checkpoint" => self.checkpoint = path(value),
            "log" => self.log = path(value),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, origin: &Path, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| CliError::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            self.set(k.trim(), v.trim()).map_err(err)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        self.apply_text(path, &text)
    }

    /// Applies `key=value` overrides from the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for p in pairs {
            let p = p.as_ref();
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{p}` is not key=value")))?;
            self.set(k.trim(), v.trim()).map_err(CliError::Usage)?;
        }
        Ok(())
    }

    /// Reads the seed override from the environment, if present.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn model_config(&self, vocab: usize) -> Result<ModelConfig> {
        if self.d_bilinear != self.d_model {
            return Err(CliError::Usage(format!(
                "d_bilinear ({}) must equal d_model ({}): residual updates need a single width",
                self.d_bilinear, self.d_model
            )));
        }
        let cfg = ModelConfig {
            width: self.d_model,
            channel: self.d_channel,
            heads: self.heads,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            memory: self.memory_slots,
            concepts: self.concepts,
            vocab,
            tap_layer: if self.tap_layer == 0 { self.encoder_layers } else { self.tap_layer },
            mode: self.attention,
            use_concepts: self.use_concepts,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            batch_size: self.batch_size.max(1),
            weights: LossWeights {
                ce: self.lambda_ce,
                mlc: self.lambda_mlc,
            },
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }

    /// Renders the configuration in the file format accepted by
    /// [`RunConfig::apply_text`].
    pub fn render(&self) -> String {
        let mode = match self.attention {
            AttentionMode::SparseRelu => "sparse",
            AttentionMode::SoftmaxBaseline => "softmax",
        };
        let p = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let _ = writeln!(s, "d_model = {}", self.d_model);
        let _ = writeln!(s, "d_bilinear = {}", self.d_bilinear);
        let _ = writeln!(s, "d_channel = {}", self.d_channel);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "encoder_layers = {}", self.encoder_layers);
        let _ = writeln!(s, "decoder_layers = {}", self.decoder_layers);
        let _ = writeln!(s, "memory_slots = {}", self.memory_slots);
        let _ = writeln!(s, "concepts = {}", self.concepts);
        let _ = writeln!(s, "tap_layer = {}", self.tap_layer);
        let _ = writeln!(s, "attention = {mode}");
        let _ = writeln!(s, "use_concepts = {}", self.use_concepts);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "lambda_ce = {}", self.lambda_ce);
        let _ = writeln!(s, "lambda_mlc = {}", self.lambda_mlc);
        let _ = writeln!(s, "clip_norm = {}", self.clip_norm);
        let _ = writeln!(s, "min_freq = {}", self.min_freq);
        let _ = writeln!(s, "beam_width = {}", self.beam_width);
        let _ = writeln!(s, "max_len = {}", self.max_len);
        let _ = writeln!(s, "features = {}", p(&self.features));
        let _ = writeln!(s, "reports = {}", p(&self.reports));
        let _ = writeln!(s, "vocab = {}", p(&self.vocab));
        let _ = writeln!(s, "concept_vocab = {}", p(&self.concept_vocab));
        let _ = writeln!(s, "checkpoint = {}", p(&self.checkpoint));
        let _ = writeln!(s, "log = {}", p(&self.log));
        s
    }
}
