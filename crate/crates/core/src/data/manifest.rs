use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_annotations, ClassTaxonomy, Dataset, DatasetKind, Subset};
use crate::error::{Error, Result};

/// Train/test annotation files of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

/// Maps a dataset's splits, scanner domains and test subsets to COCO files.
///
/// ```toml
/// dataset = "EDS"
/// image_root = "images"
///
/// [splits]
/// train = "train.json"
/// test = "test.json"
///
/// [domains.1]
/// train = "d1/train.json"
/// test = "d1/test.json"
///
/// [subsets]
/// easy = "test_easy.json"
/// ```
///
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset: DatasetKind,
    /// Class count for `SYNTHETIC` datasets.
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub image_root: Option<PathBuf>,
    #[serde(default)]
    pub splits: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub domains: BTreeMap<String, ManifestEntry>,
    #[serde(default)]
    pub subsets: BTreeMap<String, PathBuf>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = toml::from_str(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn taxonomy(&self) -> ClassTaxonomy {
        ClassTaxonomy::for_kind(self.dataset, self.num_classes.unwrap_or(1))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn load_file(&self, p: &Path) -> Result<Dataset> {
        let root = self.image_root.as_ref().map(|r| self.resolve(r));
        let (ds, _) = load_annotations(&self.resolve(p), &self.taxonomy(), root.as_deref())?;
        Ok(ds)
    }

    pub fn split(&self, name: &str) -> Result<Dataset> {
        let p = self
            .splits
            .get(name)
            .ok_or_else(|| Error::Data(format!("manifest has no split {name:?}")))?;
        self.load_file(p)
    }

    pub fn domain_ids(&self) -> Result<Vec<u32>> {
        let mut ids = self
            .domains
            .keys()
            .map(|k| {
                k.parse::<u32>()
                    .map_err(|_| Error::Data(format!("domain key {k:?} is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        ids.sort_unstable();
        Ok(ids)
    }

    /// `which` is "train" or "test".
    pub fn domain(&self, domain: u32, which: &str) -> Result<Dataset> {
        let entry = self
            .domains
            .get(&domain.to_string())
            .ok_or_else(|| Error::Data(format!("manifest has no domain {domain}")))?;
        let p = match which {
            "train" => entry.train.as_ref(),
            "test" => entry.test.as_ref(),
            _ => None,
        }
        .ok_or_else(|| Error::Data(format!("manifest domain {domain} has no {which} file")))?;
        self.load_file(p)
    }

    /// Per-image subset labels gathered from the subset files.
    pub fn subset_labels(&self) -> Result<BTreeMap<u64, Subset>> {
        let mut labels = BTreeMap::new();
        for (key, p) in &self.subsets {
            let subset: Subset = key.parse()?;
            for img in self.load_file(p)?.images {
                if let Some(prev) = labels.insert(img.id, subset) {
                    if prev != subset {
                        return Err(Error::Data(format!(
                            "image {} labelled both {} and {}",
                            img.id,
                            prev.as_str(),
                            subset.as_str()
                        )));
                    }
                }
            }
        }
        Ok(labels)
    }
}
