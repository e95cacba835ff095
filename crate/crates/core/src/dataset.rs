//! Labeled image datasets: the JSONL manifest on disk and decoded samples.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use image::RgbaImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::raster;

/// One manifest line: `{"id": ..., "locator": ..., "label": ...}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub id: String,
    pub locator: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<DatasetEntry>,
    /// Relative locators resolve against this directory.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<DatasetEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        if let Some(dup) = entries.iter().find(|e| !seen.insert(e.id.as_str())) {
            return Err(Error::Input(format!("duplicate dataset id `{}`", dup.id)));
        }
        Ok(DatasetManifest {
            entries,
            base_dir: base_dir.into(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = fsutil::read_jsonl(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        DatasetManifest::new(entries, base)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &fsutil::jsonl_bytes(&self.entries)?)
    }

    pub fn resolve(&self, locator: &str) -> PathBuf {
        resolve_locator(&self.base_dir, locator)
    }

    pub fn load_image(&self, entry: &DatasetEntry) -> Result<RgbaImage> {
        let path = self.resolve(&entry.locator);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        raster::decode_image(&entry.id, &bytes)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Seeded subsample of at most `cap` entries, kept in manifest order.
    pub fn capped(&self, cap: Option<usize>, seed: u64) -> DatasetManifest {
        let entries = match cap {
            Some(cap) if cap < self.entries.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut picked = rand::seq::index::sample(&mut rng, self.entries.len(), cap).into_vec();
                picked.sort_unstable();
                picked.into_iter().map(|i| self.entries[i].clone()).collect()
            }
            _ => self.entries.clone(),
        };
        DatasetManifest {
            entries,
            base_dir: self.base_dir.clone(),
        }
    }
}

pub fn resolve_locator(base: &Path, locator: &str) -> PathBuf {
    let p = Path::new(locator);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// A decoded, labeled image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: String,
    pub image: RgbaImage,
}

/// Decode every entry. Undecodable images are logged and skipped; more than
/// `max_skip_fraction` of them is a hard error.
pub fn decode_all(manifest: &DatasetManifest, max_skip_fraction: f64) -> Result<Vec<Sample>> {
    let mut samples = Vec::with_capacity(manifest.len());
    let mut skipped = 0;
    for entry in &manifest.entries {
        match manifest.load_image(entry) {
            Ok(image) => samples.push(Sample {
                id: entry.id.clone(),
                label: entry.label.clone(),
                image,
            }),
            Err(e) => {
                log::warn!("skipping `{}`: {e}", entry.id);
                skipped += 1;
            }
        }
    }
    if skipped as f64 > max_skip_fraction * manifest.len() as f64 {
        return Err(Error::TooManySkipped {
            skipped,
            total: manifest.len(),
        });
    }
    Ok(samples)
}
