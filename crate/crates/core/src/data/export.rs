//! Writing synthetic datasets to disk as PNG images, COCO annotation files
//! and a dataset manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    generate_synthetic, save_annotations, Dataset, DatasetKind, DatasetManifest, ManifestEntry, Subset, SynthSpec,
};
use crate::error::{Error, Result};

/// Which manifest sections a synthetic dataset is written for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SynthLayout {
    /// `splits.train`, `splits.test` and, with `val_images > 0`, `splits.val`.
    #[default]
    Split,
    /// One colour-shifted train/test pair per scanner domain.
    Domains,
    /// A split whose test images are labelled easy, hard and hidden in turn.
    Subsets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthDatasetConfig {
    pub layout: SynthLayout,
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    /// Domain ids for [`SynthLayout::Domains`].
    pub domains: Vec<u32>,
    /// Base generator settings; `n_images`, `domain` and `first_id` are set per part.
    pub spec: SynthSpec,
}

impl Default for SynthDatasetConfig {
    fn default() -> Self {
        Self {
            layout: SynthLayout::Split,
            train_images: 8,
            val_images: 0,
            test_images: 8,
            domains: vec![1, 2, 3],
            spec: SynthSpec::default(),
        }
    }
}

/// Save each image of `dataset` as `image_dir/<file_name>`.
pub fn save_images(dataset: &Dataset, image_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(image_dir).map_err(|e| Error::io(image_dir, e))?;
    for rec in &dataset.images {
        let path = image_dir.join(&rec.file_name);
        rec.load_rgb()?
            .save(&path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

struct Writer<'a> {
    cfg: &'a SynthDatasetConfig,
    dir: &'a Path,
    next_id: u64,
    part: u64,
}

impl Writer<'_> {
    fn part(&mut self, n: usize, domain: Option<u32>, file: &str) -> Result<(Dataset, PathBuf)> {
        self.part += 1;
        let ds = generate_synthetic(&SynthSpec {
            seed: self.cfg.spec.seed.wrapping_add(self.part),
            n_images: n,
            domain,
            first_id: self.next_id,
            ..self.cfg.spec.clone()
        });
        self.next_id += n as u64;
        save_images(&ds, &self.dir.join("images"))?;
        let rel = PathBuf::from(file);
        save_annotations(&ds, &self.dir.join(&rel))?;
        Ok((ds, rel))
    }
}

/// Generate a synthetic dataset under `out_dir` and write its
/// `manifest.toml`. Returns the manifest as loaded from disk.
pub fn write_synthetic(cfg: &SynthDatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if cfg.train_images == 0 || cfg.test_images == 0 {
        return Err(Error::Config("train_images and test_images must be at least 1".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut w = Writer {
        cfg,
        dir: out_dir,
        next_id: cfg.spec.first_id,
        part: 0,
    };
    let mut manifest = DatasetManifest {
        dataset: DatasetKind::Synthetic,
        num_classes: Some(cfg.spec.num_classes.max(1)),
        image_root: Some(PathBuf::from("images")),
        splits: BTreeMap::new(),
        domains: BTreeMap::new(),
        subsets: BTreeMap::new(),
        base_dir: out_dir.to_path_buf(),
    };
    match cfg.layout {
        SynthLayout::Split | SynthLayout::Subsets => {
            let (_, train) = w.part(cfg.train_images, None, "train.json")?;
            manifest.splits.insert("train".into(), train);
            if cfg.val_images > 0 {
                let (_, val) = w.part(cfg.val_images, None, "val.json")?;
                manifest.splits.insert("val".into(), val);
            }
            let (test_set, test) = w.part(cfg.test_images, None, "test.json")?;
            manifest.splits.insert("test".into(), test);
            if cfg.layout == SynthLayout::Subsets {
                for (k, subset) in Subset::ALL.into_iter().enumerate() {
                    let part = Dataset {
                        taxonomy: test_set.taxonomy.clone(),
                        images: test_set.images.iter().skip(k).step_by(3).cloned().collect(),
                    };
                    let rel = PathBuf::from(format!("test_{}.json", subset.as_str()));
                    save_annotations(&part, &out_dir.join(&rel))?;
                    manifest.subsets.insert(subset.as_str().into(), rel);
                }
            }
        }
        SynthLayout::Domains => {
            if cfg.domains.len() < 2 {
                return Err(Error::Config("the domain layout needs at least two domains".into()));
            }
            for &d in &cfg.domains {
                let (_, train) = w.part(cfg.train_images, Some(d), &format!("d{d}_train.json"))?;
                let (_, test) = w.part(cfg.test_images, Some(d), &format!("d{d}_test.json"))?;
                manifest.domains.insert(
                    d.to_string(),
                    ManifestEntry {
                        train: Some(train),
                        test: Some(test),
                    },
                );
            }
        }
    }
    let path = out_dir.join("manifest.toml");
    manifest.save(&path)?;
    DatasetManifest::load(&path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(layout: SynthLayout) -> SynthDatasetConfig {
        SynthDatasetConfig {
            layout,
            train_images: 4,
            val_images: 2,
            test_images: 5,
            spec: SynthSpec {
                image_size: 64,
                min_object: 12,
                max_object: 24,
                ..SynthSpec::default()
            },
            ..SynthDatasetConfig::default()
        }
    }

    #[test]
    fn split_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_synthetic(&small(SynthLayout::Split), dir.path()).unwrap();
        let train = m.split("train").unwrap();
        let test = m.split("test").unwrap();
        assert_eq!((train.len(), m.split("val").unwrap().len(), test.len()), (4, 2, 5));
        let ids: Vec<u64> = train.images.iter().chain(&test.images).map(|i| i.id).collect();
        assert!(
            ids.windows(2).all(|w| w[0] < w[1]),
            "ids must be unique across parts: {ids:?}"
        );
        let regenerated = generate_synthetic(&SynthSpec {
            seed: 1,
            n_images: 4,
            ..small(SynthLayout::Split).spec
        });
        assert_eq!(
            *train.images[0].load_rgb().unwrap(),
            *regenerated.images[0].load_rgb().unwrap()
        );
        assert_eq!(train.images[0].annotations, regenerated.images[0].annotations);
    }

    #[test]
    fn subsets_partition_the_test_set() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_synthetic(&small(SynthLayout::Subsets), dir.path()).unwrap();
        let labels = m.subset_labels().unwrap();
        assert_eq!(labels.len(), 5);
        let test = m.split("test").unwrap();
        assert!(test.images.iter().all(|i| labels.contains_key(&i.id)));
    }

    #[test]
    fn domains_layout_lists_each_domain() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_synthetic(&small(SynthLayout::Domains), dir.path()).unwrap();
        assert_eq!(m.domain_ids().unwrap(), [1, 2, 3]);
        assert_eq!(m.domain(2, "test").unwrap().len(), 5);
    }

    #[test]
    fn empty_parts_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthDatasetConfig {
            test_images: 0,
            ..SynthDatasetConfig::default()
        };
        assert!(matches!(write_synthetic(&cfg, dir.path()), Err(Error::Config(_))));
    }
}
