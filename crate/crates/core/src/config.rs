//! Flat `key = value` run configuration covering every tunable in the
//! pipeline. `#` starts a comment; unknown keys are rejected; values are
//! validated against the owning module's rules when the config is finalized.

use std::collections::HashSet;

use thiserror::Error;

use crate::encoder::EncoderConfig;
use crate::harness::PipelineConfig;
use crate::tokens::{DefaultPolicy, TokenMode};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {0}: expected 'key = value'")]
    BadLine(usize),
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {reason}")]
    BadValue { key: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// The full pipeline configuration plus the extraction mode and job count.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: TokenMode,
    pub pipeline: PipelineConfig,
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: TokenMode::Odt,
            pipeline: PipelineConfig::default(),
            jobs: None,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        reason: format!("cannot parse {value:?}"),
    })
}

fn parse_set(value: &str) -> HashSet<String> {
    value
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

impl RunConfig {
    /// Parse file contents; later lines override earlier ones.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::BadLine(i + 1))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let p = &mut self.pipeline;
        match key {
            "mode" => {
                self.mode = TokenMode::parse(value).ok_or_else(|| ConfigError::BadValue {
                    key: key.into(),
                    reason: "expected odt or ost".into(),
                })?;
            }
            "jobs" => self.jobs = Some(parse_as(key, value)?),

            "filter.keep" => p.filter.keep = parse_set(value),
            "filter.drop" => p.filter.drop = parse_set(value),
            "filter.default_policy" => {
                p.filter.default_policy = match value {
                    "keep_unknown" => DefaultPolicy::KeepUnknown,
                    "drop_unknown" => DefaultPolicy::DropUnknown,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            reason: "expected keep_unknown or drop_unknown".into(),
                        })
                    }
                }
            }

            "decode.max_depth" => p.decode.max_depth = parse_as(key, value)?,
            "decode.min_b64_len" => p.decode.min_b64_len = parse_as(key, value)?,
            "decode.printable_ratio" => p.decode.printable_ratio = parse_as(key, value)?,

            "normalize.max_token_len" => p.normalize.max_token_len = parse_as(key, value)?,
            "normalize.entropy_high" => p.normalize.entropy_high = parse_as(key, value)?,
            "normalize.entropy_low" => p.normalize.entropy_low = parse_as(key, value)?,

            "embed.minn" => p.embed.minn = parse_as(key, value)?,
            "embed.maxn" => p.embed.maxn = parse_as(key, value)?,
            "embed.buckets" => p.embed.buckets = parse_as(key, value)?,
            "embed.dim" => p.embed.dim = parse_as(key, value)?,
            "embed.window" => p.embed.window = parse_as(key, value)?,
            "embed.negatives" => p.embed.negatives = parse_as(key, value)?,
            "embed.epochs" => p.embed.epochs = parse_as(key, value)?,
            "embed.lr" => p.embed.lr = parse_as(key, value)?,
            "embed.seed" => p.embed.seed = parse_as(key, value)?,

            "encoder.d_model" => p.encoder.d_model = parse_as(key, value)?,
            "encoder.n_heads" => p.encoder.n_heads = parse_as(key, value)?,
            "encoder.n_layers" => p.encoder.n_layers = parse_as(key, value)?,
            "encoder.ff_dim" => p.encoder.ff_dim = parse_as(key, value)?,
            "encoder.max_len" => p.encoder.max_len = parse_as(key, value)?,
            "encoder.window" => p.encoder.window = parse_as(key, value)?,
            "encoder.stride" => p.encoder.stride = parse_as(key, value)?,
            "encoder.dropout" => p.encoder.dropout = parse_as(key, value)?,

            "fusion.lambda" => p.train.lambda = parse_as(key, value)?,
            "head.hidden" => p.train.head_hidden = parse_as(key, value)?,

            "train.epochs" => p.train.epochs = parse_as(key, value)?,
            "train.batch" => p.train.batch = parse_as(key, value)?,
            "train.seed" => p.train.seed = parse_as(key, value)?,
            "train.lr" => p.train.adamw.lr = parse_as(key, value)?,
            "train.beta1" => p.train.adamw.beta1 = parse_as(key, value)?,
            "train.beta2" => p.train.adamw.beta2 = parse_as(key, value)?,
            "train.eps" => p.train.adamw.eps = parse_as(key, value)?,
            "train.weight_decay" => p.train.adamw.weight_decay = parse_as(key, value)?,

            "split.train" => p.split.ratios.0 = parse_as(key, value)?,
            "split.val" => p.split.ratios.1 = parse_as(key, value)?,
            "split.test" => p.split.ratios.2 = parse_as(key, value)?,
            "split.seed" => p.split.seed = parse_as(key, value)?,
            "split.stratified" => p.split.stratified = parse_as(key, value)?,

            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Cross-check values against the owning modules' invariants.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.pipeline;
        let inv = |e: String| ConfigError::Invalid(e);
        p.filter.validate().map_err(|e| inv(e.to_string()))?;
        p.decode.validate().map_err(|e| inv(e.to_string()))?;
        p.embed.validate().map_err(|e| inv(e.to_string()))?;
        p.split.validate().map_err(|e| inv(e.to_string()))?;
        // vocab_size is data-dependent; validate the rest with a stand-in.
        EncoderConfig {
            vocab_size: 1,
            ..p.encoder
        }
        .validate()
        .map_err(|e| inv(e.to_string()))?;
        if !(0.0..=1.0).contains(&p.train.lambda) {
            return Err(inv(format!("fusion.lambda {} outside [0, 1]", p.train.lambda)));
        }
        if p.train.batch == 0 {
            return Err(inv("train.batch must be >= 1".into()));
        }
        if let Some(0) = self.jobs {
            return Err(inv("jobs must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equivalent config.
    pub fn to_text(&self) -> String {
        let p = &self.pipeline;
        let mut keep: Vec<&str> = p.filter.keep.iter().map(|s| s.as_str()).collect();
        keep.sort_unstable();
        let mut drop: Vec<&str> = p.filter.drop.iter().map(|s| s.as_str()).collect();
        drop.sort_unstable();
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("mode", self.mode.as_str().to_string());
        push("filter.keep", keep.join(","));
        push("filter.drop", drop.join(","));
        push(
            "filter.default_policy",
            match p.filter.default_policy {
                DefaultPolicy::KeepUnknown => "keep_unknown".into(),
                DefaultPolicy::DropUnknown => "drop_unknown".into(),
            },
        );
        push("decode.max_depth", p.decode.max_depth.to_string());
        push("decode.min_b64_len", p.decode.min_b64_len.to_string());
        push("decode.printable_ratio", p.decode.printable_ratio.to_string());
        push("normalize.max_token_len", p.normalize.max_token_len.to_string());
        push("normalize.entropy_high", p.normalize.entropy_high.to_string());
        push("normalize.entropy_low", p.normalize.entropy_low.to_string());
        push("embed.minn", p.embed.minn.to_string());
        push("embed.maxn", p.embed.maxn.to_string());
        push("embed.buckets", p.embed.buckets.to_string());
        push("embed.dim", p.embed.dim.to_string());
        push("embed.window", p.embed.window.to_string());
        push("embed.negatives", p.embed.negatives.to_string());
        push("embed.epochs", p.embed.epochs.to_string());
        push("embed.lr", p.embed.lr.to_string());
        push("embed.seed", p.embed.seed.to_string());
        push("encoder.d_model", p.encoder.d_model.to_string());
        push("encoder.n_heads", p.encoder.n_heads.to_string());
        push("encoder.n_layers", p.encoder.n_layers.to_string());
        push("encoder.ff_dim", p.encoder.ff_dim.to_string());
        push("encoder.max_len", p.encoder.max_len.to_string());
        push("encoder.window", p.encoder.window.to_string());
        push("encoder.stride", p.encoder.stride.to_string());
        push("encoder.dropout", p.encoder.dropout.to_string());
        push("fusion.lambda", p.train.lambda.to_string());
        push("head.hidden", p.train.head_hidden.to_string());
        push("train.epochs", p.train.epochs.to_string());
        push("train.batch", p.train.batch.to_string());
        push("train.seed", p.train.seed.to_string());
        push("train.lr", p.train.adamw.lr.to_string());
        push("train.beta1", p.train.adamw.beta1.to_string());
        push("train.beta2", p.train.adamw.beta2.to_string());
        push("train.eps", p.train.adamw.eps.to_string());
        push("train.weight_decay", p.train.adamw.weight_decay.to_string());
        push("split.train", p.split.ratios.0.to_string());
        push("split.val", p.split.ratios.1.to_string());
        push("split.test", p.split.ratios.2.to_string());
        push("split.seed", p.split.seed.to_string());
        push("split.stratified", p.split.stratified.to_string());
        if let Some(jobs) = self.jobs {
            push("jobs", jobs.to_string());
        }
        out
    }

    /// Convenience accessors for the seed knobs that commands override.
    pub fn set_seed_everywhere(&mut self, seed: u64) {
        self.pipeline.embed.seed = seed;
        self.pipeline.train.seed = seed;
        self.pipeline.split.seed = seed;
    }
}
