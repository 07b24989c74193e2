//! Experiment file: JSON, unknown keys rejected, dotted `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ata_core::augment::AugmentConfig;
use ata_core::tasks::{generate_domain, load_image_folder, DatasetHandle, DomainSpec};
use ata_core::train::{FinetuneConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Where a domain's images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        spec: DomainSpec,
        #[serde(default = "default_images_per_class")]
        images_per_class: usize,
    },
    /// One sub-directory per class.
    Folder { name: String, path: PathBuf, image_size: usize },
}

fn default_images_per_class() -> usize {
    40
}

impl DataSource {
    pub fn load(&self) -> ata_core::Result<DatasetHandle> {
        match self {
            DataSource::Synthetic { spec, images_per_class } => generate_domain(spec, *images_per_class),
            DataSource::Folder { name, path, image_size } => {
                let mut d = load_image_folder(path, *image_size)?;
                d.name = name.clone();
                Ok(d)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label of the model in result rows.
    #[serde(default = "default_model_name")]
    pub model_name: String,
    pub source: DataSource,
    #[serde(default)]
    pub validation: Option<DataSource>,
    #[serde(default)]
    pub targets: Vec<DataSource>,
    /// Meta-training settings. Augmentation lives in `augment`, not here.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    /// Tasks sampled per target domain by `finetune`.
    #[serde(default = "default_finetune_episodes")]
    pub finetune_episodes: usize,
    /// Encoder checkpoint stem used to initialise meta-training.
    #[serde(default)]
    pub encoder_checkpoint: Option<PathBuf>,
    /// Model checkpoint stem read by `eval`, `finetune` and `ablate-reg`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_model_name() -> String {
    "ata".into()
}

fn default_finetune_episodes() -> usize {
    600
}

impl ExperimentConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        self.train.validate()?;
        self.finetune.validate()?;
        for source in std::iter::once(&self.source).chain(&self.validation).chain(&self.targets) {
            if let DataSource::Synthetic { spec, images_per_class } = source {
                spec.validate()?;
                if *images_per_class == 0 {
                    bail!("invalid config field `images_per_class` of `{}`: must be positive", spec.name);
                }
            }
        }
        if self.finetune_episodes == 0 {
            bail!("invalid config field `finetune_episodes`: must be positive");
        }
        Ok(())
    }
}

/// Reads `path`, applies `overrides` and validates the result.
pub fn load(path: &Path, overrides: &[String]) -> anyhow::Result<(ExperimentConfig, Value)> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let mut value: Value = serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display()))?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    if value.pointer("/train/augment").is_some() {
        bail!("invalid config field `train.augment`: augmentation settings go in the top-level `augment` section");
    }
    let mut cfg: ExperimentConfig =
        serde_json::from_value(value).with_context(|| format!("invalid config {}", path.display()))?;
    cfg.train.augment = cfg.augment.clone();
    cfg.validate()?;
    // echo the fully resolved form, defaults included
    let mut resolved = serde_json::to_value(&cfg)?;
    if let Some(train) = resolved.get_mut("train").and_then(Value::as_object_mut) {
        train.remove("augment");
    }
    Ok((cfg, resolved))
}

/// `a.b.c=v` sets `value["a"]["b"]["c"]`. `v` is parsed as JSON when
/// possible and kept as a string otherwise.
pub fn apply_override(value: &mut Value, assignment: &str) -> anyhow::Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!("override `{assignment}` is not of the form key=value");
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty segment");
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = value;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), parsed);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .with_context(|| format!("override key `{key}`: `{part}` indexes an array"))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .with_context(|| format!("override key `{key}`: index {idx} out of {len}"))?;
                if last {
                    *slot = parsed;
                    return Ok(());
                }
                slot
            }
            _ => bail!("override key `{key}`: `{}` is not an object", parts[..i].join(".")),
        };
    }
    unreachable!("loop returns on the last segment")
}
