//! Run directory bookkeeping: a manifest of completed steps, atomic file
//! replacement and staging directories, so an interrupted command never
//! leaves a half-written output where a finished one is expected.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub command: Vec<String>,
    /// Everything the step's outputs depend on; equal stamps mean a rerun
    /// would reproduce the same files.
    pub stamp: serde_json::Value,
    pub outputs: Vec<String>,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub steps: BTreeMap<String, Step>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            tool: "vibra".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            steps: BTreeMap::new(),
        }
    }
}

pub struct RunDir {
    pub root: PathBuf,
}

/// What to do about a step whose outputs may already exist.
pub enum Plan {
    /// Same inputs as the recorded run: nothing to do.
    UpToDate,
    Run,
}

impl RunDir {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating run directory {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let path = self.path(MANIFEST);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Decides whether step `name` must run. A completed step with a
    /// different stamp is only redone with `force`.
    pub fn plan(&self, name: &str, stamp: &serde_json::Value, force: bool) -> Result<Plan> {
        let manifest = self.manifest()?;
        match manifest.steps.get(name) {
            Some(step) if step.complete && &step.stamp == stamp && !force => {
                let missing = step.outputs.iter().find(|o| !self.path(o).exists());
                match missing {
                    None => Ok(Plan::UpToDate),
                    Some(_) => Ok(Plan::Run),
                }
            }
            Some(step) if step.complete && &step.stamp != stamp && !force => bail!(
                "step '{name}' already completed in {} with different inputs; rerun with --force to replace it",
                self.root.display()
            ),
            _ => Ok(Plan::Run),
        }
    }

    pub fn record(&self, name: &str, step: Step) -> Result<()> {
        let mut manifest = self.manifest()?;
        manifest.steps.insert(name.to_string(), step);
        write_atomic(
            &self.path(MANIFEST),
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )
    }

    /// A fresh staging directory next to `final_rel`.
    pub fn stage(&self, final_rel: &str) -> Result<PathBuf> {
        let staging = self.path(format!("{final_rel}.partial"));
        if staging.exists() {
            fs::remove_dir_all(&staging).with_context(|| format!("clearing {}", staging.display()))?;
        }
        fs::create_dir_all(&staging).with_context(|| format!("creating {}", staging.display()))?;
        Ok(staging)
    }

    /// Moves a finished staging directory into place, replacing any
    /// previous output.
    pub fn publish(&self, staging: &Path, final_rel: &str) -> Result<PathBuf> {
        let dest = self.path(final_rel);
        if dest.exists() {
            fs::remove_dir_all(&dest).with_context(|| format!("replacing {}", dest.display()))?;
        }
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::rename(staging, &dest).with_context(|| format!("publishing {}", dest.display()))?;
        Ok(dest)
    }
}

/// Writes through a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
