use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BoxAnnotation, ClassTaxonomy, Dataset, ImageRecord, ImageSource};
use crate::bbox::BBox;
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    /// `[x, y, width, height]`
    bbox: [f64; 4],
    #[serde(default)]
    area: f64,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// Side information gathered while loading.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Zero-area boxes that were skipped.
    pub degenerate_dropped: usize,
}

/// Load a COCO-style annotation file. Image paths resolve against the
/// file's directory unless `image_root` is given.
///
/// Categories are matched to the taxonomy by code or long name. Without a
/// `categories` section, `category_id` is taken as the class index.
pub fn load_annotations(
    path: &Path,
    taxonomy: &ClassTaxonomy,
    image_root: Option<&Path>,
) -> Result<(Dataset, LoadReport)> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let coco: CocoFile = serde_json::from_str(&text).map_err(|e| Error::Json(format!("{}: {e}", path.display())))?;
    let root = image_root
        .map(Path::to_path_buf)
        .unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());

    let mut class_of: BTreeMap<u64, usize> = BTreeMap::new();
    for cat in &coco.categories {
        let class = taxonomy.lookup(&cat.name).ok_or_else(|| {
            Error::TaxonomyMismatch(format!(
                "category {} ({:?}) is not in the {} taxonomy",
                cat.id, cat.name, taxonomy.name
            ))
        })?;
        class_of.insert(cat.id, class);
    }

    let mut dataset = Dataset::new(taxonomy.clone());
    let mut position = BTreeMap::new();
    for img in &coco.images {
        if position.insert(img.id, dataset.images.len()).is_some() {
            return Err(Error::Data(format!("duplicate image id {}", img.id)));
        }
        dataset.images.push(ImageRecord {
            id: img.id,
            file_name: img.file_name.clone(),
            width: img.width,
            height: img.height,
            annotations: Vec::new(),
            source: ImageSource::File(root.join(&img.file_name)),
        });
    }

    let mut report = LoadReport::default();
    for ann in &coco.annotations {
        let class_id = if coco.categories.is_empty() {
            Some(ann.category_id as usize).filter(|&c| c < taxonomy.len())
        } else {
            class_of.get(&ann.category_id).copied()
        }
        .ok_or_else(|| {
            Error::TaxonomyMismatch(format!(
                "annotation {} uses category id {} unknown to the {} taxonomy",
                ann.id, ann.category_id, taxonomy.name
            ))
        })?;
        let &slot = position.get(&ann.image_id).ok_or_else(|| {
            Error::Data(format!(
                "annotation {} refers to missing image {}",
                ann.id, ann.image_id
            ))
        })?;
        let [x, y, w, h] = ann.bbox;
        let bbox = BBox::new(x, y, x + w, y + h);
        if !bbox.is_valid() {
            report.degenerate_dropped += 1;
            continue;
        }
        dataset.images[slot].annotations.push(BoxAnnotation {
            bbox,
            class_id,
            image_id: ann.image_id,
        });
    }
    if report.degenerate_dropped > 0 {
        log::warn!(
            "{}: dropped {} zero-area boxes",
            path.display(),
            report.degenerate_dropped
        );
    }
    Ok((dataset, report))
}

/// Write a dataset as COCO-style JSON. Category ids are class indices and
/// category names are taxonomy codes.
pub fn save_annotations(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut next_id = 1;
    let mut annotations = Vec::new();
    for img in &dataset.images {
        for a in &img.annotations {
            annotations.push(CocoAnnotation {
                id: next_id,
                image_id: img.id,
                category_id: a.class_id as u64,
                bbox: [a.bbox.x1, a.bbox.y1, a.bbox.width(), a.bbox.height()],
                area: a.bbox.area(),
                iscrowd: 0,
            });
            next_id += 1;
        }
    }
    let coco = CocoFile {
        images: dataset
            .images
            .iter()
            .map(|i| CocoImage {
                id: i.id,
                file_name: i.file_name.clone(),
                width: i.width,
                height: i.height,
            })
            .collect(),
        annotations,
        categories: dataset
            .taxonomy
            .codes
            .iter()
            .enumerate()
            .map(|(i, c)| CocoCategory {
                id: i as u64,
                name: c.clone(),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&coco).map_err(|e| Error::Json(e.to_string()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
