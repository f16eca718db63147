//! Declarative run configuration covering every stage of the pipeline.
//!
//! A TOML file may set any subset of fields; everything else keeps its
//! default. Unknown keys are rejected. A global `seed` (or the `DND_SEED`
//! environment variable, which wins) replaces every per-stage seed.
//!
//! Three backbone/autoencoder fields follow from other sections:
//! `backbone.vocab` from `autoencoder.codebook_size`, `backbone.classes`
//! from the dataset (shape classes, or 0 for text) and
//! `autoencoder.channels` from the dataset kind. Leaving them at their
//! default lets [`RunConfig::resolve`] fill them in; a conflicting explicit
//! value is an error.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetKind, DatasetSpec};
use crate::error::{io_at, Error, Result};
use crate::metrics::EvalConfig;
use crate::sampler::SampleRequest;
use crate::tokenizer::{AutoencoderSpec, TokenizerTrainConfig};
use crate::transformer::{BackboneConfig, HeadPlacement, TrainConfig, Variant};

pub const SEED_ENV: &str = "DND_SEED";

/// Where each stage reads and writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub tokenizer: PathBuf,
    pub tokens: PathBuf,
    pub model: PathBuf,
    pub samples: PathBuf,
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "run/data".into(),
            tokenizer: "run/tokenizer.dndk".into(),
            tokens: "run/tokens".into(),
            model: "run/model.dndk".into(),
            samples: "run/samples".into(),
            report: "run/report".into(),
        }
    }
}

impl Paths {
    /// Default layout below `root`.
    pub fn under(root: &Path) -> Self {
        Self {
            dataset: root.join("data"),
            tokenizer: root.join("tokenizer.dndk"),
            tokens: root.join("tokens"),
            model: root.join("model.dndk"),
            samples: root.join("samples"),
            report: root.join("report"),
        }
    }
}

/// Variant and head layers of the transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: Variant,
    /// Number of depths the model predicts; at most `autoencoder.depth`.
    pub depth: usize,
    /// Explicit 1-based head layers; empty selects the default placement.
    pub head_layers: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { variant: Variant::Dnd, depth: 2, head_layers: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    /// Images to generate; image `i` uses seed `seed + i`.
    pub count: usize,
    /// Class to condition on; absent for unconditional sampling.
    pub class: Option<u32>,
    pub cfg_scale: f64,
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { count: 8, class: None, cfg_scale: 1.0, temperature: 1.0, top_k: 0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Replaces every per-stage seed when set.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub dataset: DatasetSpec,
    pub autoencoder: AutoencoderSpec,
    pub tokenizer_train: TokenizerTrainConfig,
    pub backbone: BackboneConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub sample: SampleSection,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            paths: Paths::default(),
            dataset: DatasetSpec::default(),
            autoencoder: AutoencoderSpec::default(),
            tokenizer_train: TokenizerTrainConfig::default(),
            backbone: BackboneConfig { max_seq_len: 64, ..BackboneConfig::default() },
            model: ModelSection::default(),
            train: TrainConfig::default(),
            sample: SampleSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_at(path))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Parses `text` after applying `section.key=value` overrides, where
    /// `value` is a TOML value (bare words are taken as strings).
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value = parse_value(raw.trim());
            let mut parts: Vec<&str> = key.trim().split('.').collect();
            let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("empty key in {item:?}")))?;
            let mut node = &mut table;
            for part in parts {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("{part} in {key:?} is not a section")))?;
            }
            node.insert(last.to_string(), value);
        }
        table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().replace('\n', " ")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    /// The configuration without paths, as embedded in artifacts so that
    /// identical runs in different directories produce identical bytes.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config is serializable");
        v.as_object_mut().expect("struct").remove("paths");
        v
    }

    /// Reads `DND_SEED` from the environment and resolves.
    pub fn resolve_env(self) -> Result<Self> {
        let env = match std::env::var(SEED_ENV) {
            Ok(s) => Some(
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        self.resolve(env)
    }

    /// Applies the seed override, fills derived fields and validates.
    pub fn resolve(mut self, env_seed: Option<u64>) -> Result<Self> {
        if let Some(s) = env_seed {
            self.seed = Some(s);
        }
        if let Some(s) = self.seed {
            if s > i64::MAX as u64 {
                return Err(Error::Config(format!("seed {s} exceeds {}", i64::MAX)));
            }
            self.dataset.seed = s;
            self.tokenizer_train.seed = s;
            self.train.seed = s;
            self.sample.seed = s;
            self.eval.seed = s;
        }
        let defaults = RunConfig::default();
        let derive = |name: &str, current: usize, default: usize, derived: usize| -> Result<usize> {
            if current != default && current != derived {
                return Err(Error::Config(format!("{name} = {current} conflicts with the derived value {derived}")));
            }
            Ok(derived)
        };
        let (channels, classes) = match self.dataset.kind {
            DatasetKind::Shapes => (3, self.dataset.shapes.classes),
            DatasetKind::Text => (1, 0),
        };
        self.autoencoder.channels =
            derive("autoencoder.channels", self.autoencoder.channels, defaults.autoencoder.channels, channels)?;
        self.backbone.classes = derive("backbone.classes", self.backbone.classes, defaults.backbone.classes, classes)?;
        self.backbone.vocab =
            derive("backbone.vocab", self.backbone.vocab, defaults.backbone.vocab, self.autoencoder.codebook_size)?;
        if matches!(self.dataset.kind, DatasetKind::Text) {
            let t = &self.dataset.text;
            if (t.height, t.width) != (self.autoencoder.height, self.autoencoder.width) {
                return Err(Error::Config("dataset.text size must match the autoencoder input size".into()));
            }
        } else if (self.dataset.shapes.size, self.dataset.shapes.size) != (self.autoencoder.height, self.autoencoder.width) {
            return Err(Error::Config("dataset.shapes.size must match the autoencoder input size".into()));
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.autoencoder.validate().map_err(cfg)?;
        self.tokenizer_train.validate().map_err(cfg)?;
        self.backbone.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        if self.model.depth == 0 || self.model.depth > self.autoencoder.depth {
            return Err(Error::Config(format!(
                "model.depth {} must lie in [1, autoencoder.depth = {}]",
                self.model.depth, self.autoencoder.depth
            )));
        }
        let (h, w) = self.autoencoder.grid();
        if h * w > self.backbone.max_seq_len {
            return Err(Error::Config(format!(
                "{h}x{w} code grid needs backbone.max_seq_len >= {}",
                h * w
            )));
        }
        self.placement()?;
        if self.sample.class.is_some_and(|c| c as usize >= self.backbone.classes) {
            return Err(Error::Config(format!("sample.class is out of range for {} classes", self.backbone.classes)));
        }
        self.sample_request(0).validate(self.backbone.vocab).map_err(cfg)?;
        Ok(())
    }

    pub fn placement(&self) -> Result<HeadPlacement> {
        let p = if self.model.head_layers.is_empty() {
            HeadPlacement::default_for(self.model.variant, self.backbone.layers, self.model.depth)
                .map_err(|e| Error::Config(e.to_string()))?
        } else {
            HeadPlacement::new(self.model.variant, self.model.head_layers.clone())
        };
        if p.depth() != self.model.depth {
            return Err(Error::Config(format!(
                "model.head_layers lists {} heads but model.depth is {}",
                p.depth(),
                self.model.depth
            )));
        }
        p.validate(self.backbone.layers).map_err(|e| Error::Config(e.to_string()))?;
        Ok(p)
    }

    /// Request for sample `index`.
    pub fn sample_request(&self, index: usize) -> SampleRequest {
        let (h, w) = self.autoencoder.grid();
        SampleRequest {
            condition: self.sample.class,
            cfg_scale: self.sample.cfg_scale,
            temperature: self.sample.temperature,
            top_k: self.sample.top_k,
            seed: self.sample.seed.wrapping_add(index as u64),
            height: h,
            width: w,
            depth: self.model.depth,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("single key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
