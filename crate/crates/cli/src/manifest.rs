//! Per-stage manifests: every command records its configuration hash,
//! seed, inputs, outputs and applied overrides next to its artifacts.
//! Paths are stored relative to the run directory so two runs of the same
//! pipeline are byte-identical wherever they live.

use std::path::Path;

use anyhow::{bail, Context, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub overrides: Vec<String>,
}

impl Manifest {
    pub fn new(stage: &str, config_hash: &str, seed: u64) -> Self {
        Manifest {
            stage: stage.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            overrides: Vec::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("stage={}\n", self.stage));
        s.push_str(&format!("config_hash={}\n", self.config_hash));
        s.push_str(&format!("seed={}\n", self.seed));
        for i in &self.inputs {
            s.push_str(&format!("input={i}\n"));
        }
        for o in &self.outputs {
            s.push_str(&format!("output={o}\n"));
        }
        for o in &self.overrides {
            s.push_str(&format!("override={o}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = Manifest::new("", "", 0);
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            match k {
                "stage" => m.stage = v.to_string(),
                "config_hash" => m.config_hash = v.to_string(),
                "seed" => m.seed = v.parse().context("bad seed in manifest")?,
                "input" => m.inputs.push(v.to_string()),
                "output" => m.outputs.push(v.to_string()),
                "override" => m.overrides.push(v.to_string()),
                _ => {}
            }
        }
        if m.stage.is_empty() {
            bail!("manifest missing stage line");
        }
        Ok(m)
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(format!("manifest_{}.txt", self.stage));
        std::fs::write(&path, self.to_text())
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// All manifests present in a run directory, sorted by stage name.
pub fn load_all(run_dir: &Path) -> Result<Vec<Manifest>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(run_dir)
        .with_context(|| format!("reading run dir {}", run_dir.display()))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("manifest_") && n.ends_with(".txt"))
        .collect();
    names.sort();
    for name in names {
        let text = std::fs::read_to_string(run_dir.join(&name))?;
        out.push(Manifest::from_text(&text)?);
    }
    Ok(out)
}

/// Fail when artifacts from differently configured runs are mixed.
pub fn check_consistent(manifests: &[Manifest]) -> Result<()> {
    if let Some(first) = manifests.first() {
        for m in manifests {
            if m.config_hash != first.config_hash {
                bail!(
                    "run directory mixes artifacts from different configurations: \
                     stage {} has hash {}, stage {} has hash {}",
                    first.stage,
                    first.config_hash,
                    m.stage,
                    m.config_hash
                );
            }
        }
    }
    Ok(())
}

/// A stage input that must exist before the stage can run.
pub fn require_artifact(run_dir: &Path, name: &str, needed_for: &str) -> Result<()> {
    if !run_dir.join(name).exists() {
        bail!(
            "{needed_for} requires `{name}` in the run directory; \
             run the producing stage first"
        );
    }
    Ok(())
}
