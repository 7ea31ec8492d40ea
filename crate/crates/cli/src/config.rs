//! Pipeline configuration: one TOML document with a section per stage.
//! Command-line flags override individual keys; the resolved document
//! (after overrides) is what gets hashed, so artifacts produced under
//! different effective settings never mix silently.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

fn default_seed() -> u64 {
    7
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSection {
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: default_seed() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub graph: String,
    pub input_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSection {
    pub n_train: usize,
    pub n_val: usize,
    pub n_classes: usize,
    pub image_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr0: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseSection {
    pub epochs: usize,
    pub lr0: f64,
    pub s0: f64,
    #[serde(default = "default_switch")]
    pub switch_fraction: f64,
    #[serde(default = "default_keep")]
    pub keep_fraction: f64,
    #[serde(default = "default_decay")]
    pub decay_factor: f64,
    #[serde(default = "default_selection")]
    pub selection: String,
}

fn default_switch() -> f64 {
    0.5
}
fn default_keep() -> f64 {
    0.7
}
fn default_decay() -> f64 {
    0.01
}
fn default_selection() -> String {
    "largest".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneSection {
    pub ratio: f64,
    #[serde(default = "default_prune_mode")]
    pub mode: String,
    #[serde(default)]
    pub explicit_ratios: Option<Vec<f64>>,
}

fn default_prune_mode() -> String {
    "proportional".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillSection {
    pub epochs: usize,
    pub lr0: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_iou")]
    pub iou_thresh: f64,
    pub betas: Vec<f64>,
    #[serde(default = "default_weight")]
    pub soft_cls_weight: f64,
    #[serde(default = "default_weight")]
    pub soft_box_weight: f64,
    #[serde(default = "default_teacher")]
    pub teacher: String,
}

fn default_temperature() -> f64 {
    3.0
}
fn default_iou() -> f64 {
    0.5
}
fn default_weight() -> f64 {
    1.0
}
fn default_teacher() -> String {
    "base".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSection {
    #[serde(default = "default_conf")]
    pub conf_thresh: f64,
    #[serde(default = "default_interp")]
    pub interp: String,
}

fn default_conf() -> f64 {
    0.1
}
fn default_interp() -> String {
    "all".to_string()
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { conf_thresh: default_conf(), interp: default_interp() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub run: RunSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub sparse: SparseSection,
    pub prune: PruneSection,
    pub distill: DistillSection,
    #[serde(default)]
    pub eval: EvalSection,
}

/// Command-line overrides; flags win over the config file and are folded
/// into the resolved config before hashing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub graph: Option<String>,
    pub input_size: Option<usize>,
    pub sparse_rate: Option<f64>,
    pub total_prune_ratio: Option<f64>,
    pub temperature: Option<f64>,
    pub betas: Option<Vec<f64>>,
    pub iou_thresh: Option<f64>,
    pub teacher: Option<String>,
}

impl Overrides {
    /// Human-readable list of the overrides that were actually applied.
    pub fn applied(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(v) = self.seed {
            out.push(format!("seed={v}"));
        }
        if let Some(v) = &self.graph {
            out.push(format!("graph={v}"));
        }
        if let Some(v) = self.input_size {
            out.push(format!("input_size={v}"));
        }
        if let Some(v) = self.sparse_rate {
            out.push(format!("sparse_rate={v}"));
        }
        if let Some(v) = self.total_prune_ratio {
            out.push(format!("total_prune_ratio={v}"));
        }
        if let Some(v) = self.temperature {
            out.push(format!("temperature={v}"));
        }
        if let Some(v) = &self.betas {
            out.push(format!("betas={v:?}"));
        }
        if let Some(v) = self.iou_thresh {
            out.push(format!("iou_thresh={v}"));
        }
        if let Some(v) = &self.teacher {
            out.push(format!("teacher={v}"));
        }
        out
    }
}

impl PipelineConfig {
    /// Load a config file and fold in overrides. Relative graph paths are
    /// resolved against the config file's directory.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: PipelineConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;

        if let Some(v) = overrides.seed {
            cfg.run.seed = v;
        }
        if let Some(v) = &overrides.graph {
            cfg.model.graph = v.clone();
        }
        if let Some(v) = overrides.input_size {
            cfg.model.input_size = v;
        }
        if let Some(v) = overrides.sparse_rate {
            cfg.sparse.s0 = v;
        }
        if let Some(v) = overrides.total_prune_ratio {
            cfg.prune.ratio = v;
        }
        if let Some(v) = overrides.temperature {
            cfg.distill.temperature = v;
        }
        if let Some(v) = &overrides.betas {
            cfg.distill.betas = v.clone();
        }
        if let Some(v) = overrides.iou_thresh {
            cfg.distill.iou_thresh = v;
        }
        if let Some(v) = &overrides.teacher {
            cfg.distill.teacher = v.clone();
        }

        // resolve the graph path against the config location
        let graph_path = PathBuf::from(&cfg.model.graph);
        if graph_path.is_relative() {
            if let Some(dir) = path.parent() {
                let resolved = dir.join(&graph_path);
                if resolved.exists() {
                    cfg.model.graph = resolved.to_string_lossy().into_owned();
                }
            }
        }
        Ok(cfg)
    }

    /// Canonical serialized form of the resolved configuration.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash identifying this exact configuration (including seed).
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical().as_bytes());
        let digest = hasher.finalize();
        hex_prefix(&digest, 16)
    }
}

fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::new();
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[model]
graph = "tiny-det.graph"
input_size = 96

[data]
n_train = 8
n_val = 4
n_classes = 3
image_size = 96

[train]
epochs = 2
lr0 = 0.05
batch_size = 4

[sparse]
epochs = 2
lr0 = 0.02
s0 = 0.1

[prune]
ratio = 0.3

[distill]
epochs = 2
lr0 = 0.01
betas = [1.0, 1.0, 1.0, 1.0, 1.0]
"#;

    #[test]
    fn parse_and_hash_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, MINIMAL).unwrap();
        let a = PipelineConfig::load(&path, &Overrides::default()).unwrap();
        let b = PipelineConfig::load(&path, &Overrides::default()).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.run.seed, 7);
        assert_eq!(a.sparse.switch_fraction, 0.5);
    }

    #[test]
    fn overrides_change_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, MINIMAL).unwrap();
        let base = PipelineConfig::load(&path, &Overrides::default()).unwrap();
        let over = PipelineConfig::load(
            &path,
            &Overrides { total_prune_ratio: Some(0.5), ..Overrides::default() },
        )
        .unwrap();
        assert_ne!(base.hash(), over.hash());
        assert_eq!(over.prune.ratio, 0.5);
    }
}
