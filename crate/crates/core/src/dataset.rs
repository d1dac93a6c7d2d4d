//! Dataset manifest: a JSON array of `{image_path, label_path, split}`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{load_labels, load_raster, LabelMap, RasterImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub label_path: PathBuf,
    pub split: Split,
}

/// Entries plus the directory relative paths are resolved against.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.entries)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Loads every scene of `split`; errors if the split is empty.
    pub fn load_split(&self, split: Split, classes: usize) -> Result<Vec<Scene>> {
        let scenes: Vec<Scene> = self
            .split(split)
            .map(|e| {
                Ok(Scene {
                    image: load_raster(self.resolve(&e.image_path))?,
                    labels: load_labels(self.resolve(&e.label_path), classes)?,
                    entry: e.clone(),
                })
            })
            .collect::<Result<_>>()?;
        if scenes.is_empty() {
            return Err(Error::Dataset(format!("split {split:?} has no entries")));
        }
        for s in &scenes {
            if s.image.dims() != s.labels.dims() {
                return Err(Error::Dataset(format!(
                    "{}: image {:?} and labels {:?} differ in size",
                    s.entry.image_path.display(),
                    s.image.dims(),
                    s.labels.dims()
                )));
            }
        }
        Ok(scenes)
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: RasterImage,
    pub labels: LabelMap,
    pub entry: ManifestEntry,
}
