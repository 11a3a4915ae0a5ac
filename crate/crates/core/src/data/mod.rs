//! Annotations, datasets, class taxonomies and evaluation protocols.

mod coco;
mod export;
mod manifest;
mod protocol;
mod synth;
mod taxonomy;

use std::path::PathBuf;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};

pub use coco::{load_annotations, save_annotations, LoadReport};
pub use export::{save_images, write_synthetic, SynthDatasetConfig, SynthLayout};
pub use manifest::{DatasetManifest, ManifestEntry};
pub use protocol::{eds_sessions, pidray_eval_splits, random_split, PidraySplits, SessionSpec, Subset};
pub use synth::{domain_offset, generate_synthetic, SynthSpec};
pub use taxonomy::{ClassTaxonomy, DatasetKind};

/// Ground-truth box in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub bbox: BBox,
    pub class_id: usize,
    pub image_id: u64,
}

/// Where an image's pixels come from.
#[derive(Debug, Clone)]
pub enum ImageSource {
    File(PathBuf),
    Memory(Arc<RgbImage>),
}

#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<BoxAnnotation>,
    pub source: ImageSource,
}

impl ImageRecord {
    /// Decode (or borrow) the RGB pixels.
    pub fn load_rgb(&self) -> Result<Arc<RgbImage>> {
        match &self.source {
            ImageSource::Memory(img) => Ok(img.clone()),
            ImageSource::File(path) => {
                if !path.exists() {
                    return Err(Error::MissingPath(path.clone()));
                }
                let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
                Ok(Arc::new(img.to_rgb8()))
            }
        }
    }
}

/// An ordered collection of annotated images sharing one taxonomy.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub taxonomy: ClassTaxonomy,
    pub images: Vec<ImageRecord>,
}

impl Dataset {
    pub fn new(taxonomy: ClassTaxonomy) -> Self {
        Self {
            taxonomy,
            images: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_instances(&self) -> usize {
        self.images.iter().map(|i| i.annotations.len()).sum()
    }

    pub fn annotations(&self) -> impl Iterator<Item = &BoxAnnotation> {
        self.images.iter().flat_map(|i| i.annotations.iter())
    }

    /// Keep the images whose id satisfies `keep`, in order.
    pub fn filter(&self, mut keep: impl FnMut(&ImageRecord) -> bool) -> Dataset {
        Dataset {
            taxonomy: self.taxonomy.clone(),
            images: self.images.iter().filter(|i| keep(i)).cloned().collect(),
        }
    }

    /// Concatenate datasets with identical taxonomies.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Data("cannot concatenate zero datasets".into()))?;
        let mut out = Dataset::new(first.taxonomy.clone());
        for part in parts {
            if part.taxonomy != first.taxonomy {
                return Err(Error::TaxonomyMismatch(format!(
                    "{} vs {}",
                    first.taxonomy.name, part.taxonomy.name
                )));
            }
            out.images.extend(part.images.iter().cloned());
        }
        Ok(out)
    }
}

/// Image and instance counts of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub images: usize,
    pub instances: usize,
    /// `None` for an empty dataset.
    pub instances_per_image: Option<f64>,
}

pub fn dataset_stats(dataset: &Dataset) -> DatasetStats {
    let images = dataset.len();
    let instances = dataset.num_instances();
    DatasetStats {
        images,
        instances,
        instances_per_image: (images > 0).then(|| instances as f64 / images as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_stats_have_no_ratio() {
        let ds = Dataset::new(ClassTaxonomy::eds());
        assert_eq!(
            dataset_stats(&ds),
            DatasetStats {
                images: 0,
                instances: 0,
                instances_per_image: None
            }
        );
    }
}
