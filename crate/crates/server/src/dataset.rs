//! The read-only training dataset students may browse once the teacher
//! unlocks it.
//!
//! A dataset is a directory with one subdirectory per label. Each holds the
//! label's images (`.png`, `.jpg`, `.jpeg`); the image id is the file name.
//! An optional `manifest.json` at the root lists labels and image ids
//! explicitly instead:
//!
//! ```json
//! {"labels": [{"label_name": "cat", "image_refs": ["cat-01.jpg"]}]}
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ServerError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelImages {
    pub label_name: String,
    pub image_refs: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub labels: Vec<LabelImages>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

pub fn content_type(image_id: &str) -> &'static str {
    match extension(image_id).as_deref() {
        Some("png") => "image/png",
        _ => "image/jpeg",
    }
}

fn extension(name: &str) -> Option<String> {
    Path::new(name)
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
}

fn is_image_name(name: &str) -> bool {
    matches!(extension(name).as_deref(), Some("png" | "jpg" | "jpeg"))
}

/// Names that stay inside their directory when joined to a path.
fn is_plain_name(name: &str) -> bool {
    !name.is_empty() && !name.starts_with('.') && !name.contains(['/', '\\', '\0'])
}

impl Dataset {
    /// A dataset with no labels.
    pub fn empty() -> Self {
        Self::default()
    }

    /// Loads and checks a dataset: every listed image must exist and decode.
    pub fn load(root: &Path) -> Result<Self, ServerError> {
        let fail = |reason: String| ServerError::Dataset {
            path: root.to_path_buf(),
            reason,
        };
        if !root.is_dir() {
            return Err(fail("not a directory".into()));
        }
        let manifest_path = root.join(MANIFEST_FILE);
        let manifest = if manifest_path.is_file() {
            let text = fs::read_to_string(&manifest_path).map_err(|e| fail(format!("{MANIFEST_FILE}: {e}")))?;
            serde_json::from_str(&text).map_err(|e| fail(format!("{MANIFEST_FILE}: {e}")))?
        } else {
            scan(root).map_err(fail)?
        };

        let mut seen = HashSet::new();
        for label in &manifest.labels {
            if !is_plain_name(&label.label_name) {
                return Err(fail(format!("label name {:?} is not a plain directory name", label.label_name)));
            }
            if !seen.insert(label.label_name.as_str()) {
                return Err(fail(format!("label {:?} is listed twice", label.label_name)));
            }
            let mut ids = HashSet::new();
            for id in &label.image_refs {
                if !is_plain_name(id) || !is_image_name(id) {
                    return Err(fail(format!("image id {id:?} is not a png or jpeg file name")));
                }
                if !ids.insert(id.as_str()) {
                    return Err(fail(format!("image {id:?} is listed twice under {:?}", label.label_name)));
                }
                let path = root.join(&label.label_name).join(id);
                image::open(&path).map_err(|e| fail(format!("{}/{id}: {e}", label.label_name)))?;
            }
        }
        let images: usize = manifest.labels.iter().map(|l| l.image_refs.len()).sum();
        log::info!("dataset loaded: {} labels, {images} images", manifest.labels.len());
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn label(&self, name: &str) -> Option<&LabelImages> {
        self.manifest.labels.iter().find(|l| l.label_name == name)
    }

    /// File behind a listed image; ids not in the manifest resolve to nothing.
    pub fn image_path(&self, label: &str, image_id: &str) -> Option<PathBuf> {
        let entry = self.label(label)?;
        entry
            .image_refs
            .iter()
            .any(|id| id == image_id)
            .then(|| self.root.join(label).join(image_id))
    }
}

fn scan(root: &Path) -> Result<Manifest, String> {
    let mut labels = Vec::new();
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let Some(name) = dir.file_name().and_then(|n| n.to_str()).filter(|n| is_plain_name(n)) else {
            continue;
        };
        let image_refs = sorted_entries(&dir)?
            .into_iter()
            .filter(|p| p.is_file())
            .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_owned))
            .filter(|n| is_plain_name(n) && is_image_name(n))
            .collect();
        labels.push(LabelImages {
            label_name: name.to_owned(),
            image_refs,
        });
    }
    Ok(Manifest { labels })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, String> {
    let mut paths = fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .map(|entry| entry.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| format!("{}: {e}", dir.display()))?;
    paths.sort();
    Ok(paths)
}
