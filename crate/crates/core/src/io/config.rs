//! Run configuration and the small JSON sidecar files (class registry,
//! embedding manifest). Unknown configuration keys are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::evaluation::{ClassRegistry, ShotMode};
use crate::io::tensor::read_tensor;
use crate::prototype::EmbeddingRecord;
use crate::{ClassId, Error, Result};

/// Scene-generation block of the run configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_train_scenes")]
    pub train_scenes: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_grid() -> usize {
    16
}
fn default_classes() -> usize {
    4
}
fn default_dim() -> usize {
    8
}
fn default_scale() -> f64 {
    3.0
}
fn default_noise() -> f64 {
    0.1
}
fn default_train_scenes() -> usize {
    6
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            grid: default_grid(),
            classes: default_classes(),
            dim: default_dim(),
            scale: default_scale(),
            noise: default_noise(),
            train_scenes: default_train_scenes(),
            seed: 0,
        }
    }
}

/// Top-level run configuration. Every field has a default; unknown keys are
/// a hard error.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Prototypes per modality.
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Pyramid levels (level 1 is the deepest).
    #[serde(default = "default_levels")]
    pub levels: usize,
    /// Hidden width of the multi-level fusion chain.
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    /// Support shots per class; 0 selects the zero-shot protocol.
    #[serde(default = "default_shots")]
    pub shots: usize,
    /// Path to a class-registry JSON file.
    #[serde(default)]
    pub registry: Option<String>,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_n() -> usize {
    3
}
fn default_lambda() -> f64 {
    0.01
}
fn default_levels() -> usize {
    3
}
fn default_width() -> usize {
    8
}
fn default_lr() -> f64 {
    1e-3
}
fn default_shots() -> usize {
    1
}
fn default_steps() -> usize {
    500
}
fn default_episodes() -> usize {
    20
}
fn default_eps() -> f64 {
    1e-6
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(&path)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.levels < 1 || self.width < 1 {
            return Err(Error::Config(
                "n, levels and width must all be >= 1".to_string(),
            ));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config("lr must be positive".to_string()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".to_string()));
        }
        if !(self.eps > 0.0 && self.eps <= 1e-3) {
            return Err(Error::Config("eps must lie in (0, 1e-3]".to_string()));
        }
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be >= 1".to_string()));
        }
        Ok(())
    }

    pub fn shot_mode(&self) -> ShotMode {
        if self.shots == 0 {
            ShotMode::Zero
        } else {
            ShotMode::Shots(self.shots)
        }
    }
}

/// Registry sidecar: `{"seen": [...], "unseen": [...], "background": 0}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryFile {
    pub seen: Vec<u32>,
    pub unseen: Vec<u32>,
    pub background: u32,
}

pub fn load_registry(path: impl AsRef<Path>) -> Result<ClassRegistry> {
    let text = fs::read_to_string(path)?;
    let file: RegistryFile =
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    ClassRegistry::new(
        file.seen.into_iter().map(ClassId),
        file.unseen.into_iter().map(ClassId),
        ClassId(file.background),
    )
}

pub fn save_registry(path: impl AsRef<Path>, registry: &ClassRegistry) -> Result<()> {
    let file = RegistryFile {
        seen: registry.seen.iter().map(|c| c.0).collect(),
        unseen: registry.unseen.iter().map(|c| c.0).collect(),
        background: registry.background.0,
    };
    fs::write(
        path,
        serde_json::to_string_pretty(&file).map_err(|e| Error::Io(e.to_string()))?,
    )?;
    Ok(())
}

/// Embedding manifest: class names and description strings for auditability,
/// plus the tensor paths the engine actually reads.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingManifest {
    pub classes: Vec<ManifestClass>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestClass {
    pub id: u32,
    pub name: String,
    #[serde(default)]
    pub descriptions: Vec<String>,
    /// Rank-1 tensor path, relative to the manifest.
    pub name_embedding: String,
    #[serde(default)]
    pub description_embeddings: Vec<String>,
}

/// Loads every record of a manifest; embedding paths resolve relative to the
/// manifest's directory.
pub fn load_records(path: impl AsRef<Path>) -> Result<BTreeMap<ClassId, EmbeddingRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let manifest: EmbeddingManifest =
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = BTreeMap::new();
    for class in &manifest.classes {
        let name_embedding = read_tensor(base.join(&class.name_embedding))?.into_vector()?;
        let description_embeddings = class
            .description_embeddings
            .iter()
            .map(|p| read_tensor(base.join(p))?.into_vector())
            .collect::<Result<Vec<_>>>()?;
        records.insert(
            ClassId(class.id),
            EmbeddingRecord {
                class_id: ClassId(class.id),
                name_embedding,
                description_embeddings,
            },
        );
    }
    Ok(records)
}
