//! Dataset index manifest: a JSON list of recordings with their ids and
//! annotation files, paths relative to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::splits::SessionKey;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub participant_id: u16,
    pub session_id: u16,
    pub recording: PathBuf,
    /// Generator ground truth; doubles as the scripted session protocol.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
    /// Detector output (after any manual corrections).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<PathBuf>,
}

impl IndexEntry {
    pub fn key(&self) -> SessionKey {
        SessionKey::new(self.participant_id, self.session_id)
    }

    pub fn id(&self) -> String {
        super::recording::recording_id(self.participant_id, self.session_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub sample_rate_hz: u32,
    pub channels: usize,
    pub recordings: Vec<IndexEntry>,
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetIndex {
    pub fn new(root: impl Into<PathBuf>, sample_rate_hz: u32, channels: usize) -> Self {
        Self {
            sample_rate_hz,
            channels,
            recordings: Vec::new(),
            root: root.into(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut index: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        index.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        index.recordings.sort_by_key(IndexEntry::key);
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("index serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Directory the relative paths are resolved against.
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn set_root(&mut self, root: impl Into<PathBuf>) {
        self.root = root.into();
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            self.root.join(rel)
        }
    }

    pub fn keys(&self) -> Vec<SessionKey> {
        self.recordings.iter().map(IndexEntry::key).collect()
    }

    pub fn entry(&self, key: SessionKey) -> Option<&IndexEntry> {
        self.recordings.iter().find(|e| e.key() == key)
    }
}
