use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::continual::MethodConfig;
use crate::data::{FirstTaskConfig, SynthConfig};
use crate::error::{Error, Result};
use crate::model::{ModelDims, PretrainConfig};

/// Environment variable that re-roots relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "FCRE_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    /// Generate a synthetic stream.
    Synthetic {
        #[serde(flatten)]
        config: SynthConfig,
        seed: u64,
        /// Sentences per relation in the pretraining corpus.
        #[serde(default = "default_corpus")]
        corpus_per_relation: usize,
    },
    /// One labelled JSONL file split into an N-way-K-shot stream.
    Jsonl {
        path: PathBuf,
        n_way: usize,
        k_shot: usize,
        tasks: usize,
        #[serde(default)]
        first_task: Option<FirstTaskConfig>,
        seed: u64,
    },
    /// A stream previously written by `gen-data`.
    Manifest { path: PathBuf },
}

fn default_corpus() -> usize {
    20
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub embed: usize,
    pub hidden: usize,
    pub feature: usize,
    pub phi: usize,
    #[serde(default = "default_prompts")]
    pub prompts: usize,
    /// Reject vocabularies larger than this.
    #[serde(default)]
    pub vocab_cap: Option<usize>,
}

fn default_prompts() -> usize {
    4
}

impl ModelSettings {
    pub fn dims(&self, vocab: usize) -> Result<ModelDims> {
        if let Some(cap) = self.vocab_cap {
            if vocab > cap {
                return Err(Error::config(format!("vocabulary of {vocab} exceeds the cap of {cap}")));
            }
        }
        let dims = ModelDims {
            vocab,
            embed: self.embed,
            hidden: self.hidden,
            feature: self.feature,
            phi: self.phi,
            prompts: self.prompts,
            relations: 0,
        };
        dims.validate()?;
        Ok(dims)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSettings {
    #[serde(flatten)]
    pub config: PretrainConfig,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub model: ModelSettings,
    pub pretrain: PretrainSettings,
    pub methods: Vec<MethodConfig>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        self.pretrain.config.validate()?;
        self.model.dims(crate::data::vocab::FIRST_CONTENT_ID as usize + 1)?;
        let mut labels = Vec::new();
        for m in &self.methods {
            m.validate()?;
            let l = m.label();
            if labels.contains(&l) {
                return Err(Error::config(format!("method label {l:?} appears twice; set `name` to tell them apart")));
            }
            labels.push(l);
        }
        Ok(())
    }

    /// Parse JSON text, apply `key=value` overrides, and validate.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = read_input(path)?;
        let mut cfg = ExperimentConfig::from_json(&text, overrides)?;
        cfg.resolve_relative_to(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Input paths are relative to the config file; the output directory is
    /// relative to the output-root variable when set, else to the config.
    fn resolve_relative_to(&mut self, base: &Path) {
        match &mut self.data {
            DataSource::Jsonl { path, .. } | DataSource::Manifest { path } if path.is_relative() => {
                *path = base.join(&*path);
            }
            _ => {}
        }
        if self.output_dir.is_relative() {
            let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| base.to_path_buf());
            self.output_dir = root.join(&self.output_dir);
        }
    }
}

/// Read a file named by the user; a missing or unreadable file is a usage
/// error rather than a runtime failure.
pub fn read_input(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))
}

/// `a.b.0.c=value`; `*` as a segment applies to every array element.
/// The value is parsed as JSON, falling back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let new: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::config(format!("override key {key:?} has an empty segment")));
    }
    set_path(root, &segments, &new, key)
}

fn set_path(node: &mut Value, segments: &[&str], new: &Value, key: &str) -> Result<()> {
    let (head, rest) = (segments[0], &segments[1..]);
    let last = rest.is_empty();
    match node {
        Value::Array(items) if head == "*" => {
            for item in items {
                if last {
                    *item = new.clone();
                } else {
                    set_path(item, rest, new, key)?;
                }
            }
            Ok(())
        }
        Value::Array(items) => {
            let idx: usize = head.parse().map_err(|_| Error::config(format!("{key}: {head:?} is not an index")))?;
            let item = items.get_mut(idx).ok_or_else(|| Error::config(format!("{key}: index {idx} out of range")))?;
            if last {
                *item = new.clone();
                Ok(())
            } else {
                set_path(item, rest, new, key)
            }
        }
        Value::Object(map) => {
            if last {
                map.insert(head.to_string(), new.clone());
                Ok(())
            } else {
                let child = map.entry(head.to_string()).or_insert_with(|| Value::Object(Default::default()));
                set_path(child, rest, new, key)
            }
        }
        _ => Err(Error::config(format!("{key}: cannot descend into a scalar at {head:?}"))),
    }
}
