use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub grade: u8,
    pub split: Split,
}

/// Dataset index. Paths are stored relative to the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideManifest {
    pub entries: Vec<ManifestEntry>,
}

impl SlideManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.slide_id.as_str()) {
                return Err(Error::invalid(format!("duplicate slide id {}", e.slide_id)));
            }
            if !(1..=3).contains(&e.grade) {
                return Err(Error::invalid(format!(
                    "slide {} has grade {}, expected 1, 2 or 3",
                    e.slide_id, e.grade
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest: SlideManifest = serde_json::from_slice(&std::fs::read(path)?)?;
        manifest.validate()?;
        let root = path.parent().unwrap_or(Path::new("."));
        for e in &manifest.entries {
            for p in [&e.image_path, &e.mask_path] {
                if !root.join(p).exists() {
                    return Err(Error::invalid(format!(
                        "slide {}: {} does not exist",
                        e.slide_id,
                        p.display()
                    )));
                }
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn get(&self, slide_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.slide_id == slide_id)
    }
}
