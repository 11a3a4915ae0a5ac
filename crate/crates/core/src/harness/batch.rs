//! Image preprocessing, augmentation and batching.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::Rng;

use super::AugmentConfig;
use crate::bbox::BBox;
use crate::data::{BoxAnnotation, Dataset};
use crate::error::Result;

/// Fill value for canvas regions not covered by the image.
const PAD: u8 = 114;

/// One image resized to the network input, with boxes in that frame.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub id: u64,
    pub rgb: Arc<RgbImage>,
    pub boxes: Vec<BoxAnnotation>,
    /// Network pixels per original pixel, `(sx, sy)`.
    pub scale: (f64, f64),
}

/// Network inputs and targets of one batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<u64>,
    /// (B, 3, S, S) in [0, 1].
    pub images: Tensor,
    pub targets: Vec<Vec<BoxAnnotation>>,
}

#[derive(Debug, Clone)]
pub struct Preprocessor {
    pub image_size: usize,
    pub device: Device,
    pub dtype: DType,
}

impl Preprocessor {
    pub fn new(image_size: usize, device: &Device, dtype: DType) -> Self {
        Self {
            image_size,
            device: device.clone(),
            dtype,
        }
    }

    /// Decode and resize every image of `dataset` to the square input size.
    pub fn prepare(&self, dataset: &Dataset) -> Result<Vec<PreparedImage>> {
        let s = self.image_size as u32;
        dataset
            .images
            .iter()
            .map(|rec| {
                let src = rec.load_rgb()?;
                let (w, h) = src.dimensions();
                let rgb = if (w, h) == (s, s) {
                    src
                } else {
                    Arc::new(imageops::resize(src.as_ref(), s, s, FilterType::Triangle))
                };
                let (sx, sy) = (f64::from(s) / f64::from(w), f64::from(s) / f64::from(h));
                let boxes = rec
                    .annotations
                    .iter()
                    .map(|a| BoxAnnotation {
                        bbox: a.bbox.scale(sx, sy),
                        ..*a
                    })
                    .collect();
                Ok(PreparedImage {
                    id: rec.id,
                    rgb,
                    boxes,
                    scale: (sx, sy),
                })
            })
            .collect()
    }

    /// Stack prepared images, optionally augmenting each with `rng`.
    pub fn batch<R: Rng>(&self, items: &[&PreparedImage], aug: Option<(&AugmentConfig, &mut R)>) -> Result<Batch> {
        let mut images = Vec::with_capacity(items.len());
        let mut targets = Vec::with_capacity(items.len());
        match aug {
            Some((cfg, rng)) if cfg.enabled => {
                for item in items {
                    let (img, boxes) = augment(item, cfg, rng);
                    images.push(Arc::new(img));
                    targets.push(boxes);
                }
            }
            _ => {
                for item in items {
                    images.push(item.rgb.clone());
                    targets.push(item.boxes.clone());
                }
            }
        }
        let refs: Vec<&RgbImage> = images.iter().map(|i| i.as_ref()).collect();
        Ok(Batch {
            ids: items.iter().map(|i| i.id).collect(),
            images: image_tensor(&refs, &self.device, self.dtype)?,
            targets,
        })
    }
}

/// (B, 3, H, W) tensor in [0, 1] from equally sized RGB images.
pub fn image_tensor(images: &[&RgbImage], device: &Device, dtype: DType) -> Result<Tensor> {
    let (w, h) = images.first().map(|i| i.dimensions()).unwrap_or((0, 0));
    let (w, h) = (w as usize, h as usize);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        let raw = img.as_raw();
        for c in 0..3 {
            data.extend(raw.iter().skip(c).step_by(3).map(|&v| f32::from(v) / 255.0));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// Horizontal flip and centred rescale of one prepared image.
///
/// Boxes follow the same transform, are clipped to the canvas, and are
/// dropped when less than one pixel remains on either side.
pub fn augment<R: Rng>(item: &PreparedImage, cfg: &AugmentConfig, rng: &mut R) -> (RgbImage, Vec<BoxAnnotation>) {
    let (w, h) = item.rgb.dimensions();
    let flip = rng.random_bool(cfg.hflip_prob);
    let factor = if cfg.scale_jitter > 0.0 {
        rng.random_range(1.0 - cfg.scale_jitter..=1.0 + cfg.scale_jitter)
    } else {
        1.0
    };
    let mut img = if flip {
        imageops::flip_horizontal(item.rgb.as_ref())
    } else {
        item.rgb.as_ref().clone()
    };
    let nw = ((f64::from(w) * factor).round() as u32).max(1);
    let nh = ((f64::from(h) * factor).round() as u32).max(1);
    if (nw, nh) != (w, h) {
        let scaled = imageops::resize(&img, nw, nh, FilterType::Triangle);
        let mut canvas = RgbImage::from_pixel(w, h, Rgb([PAD; 3]));
        let ox = (i64::from(w) - i64::from(nw)) / 2;
        let oy = (i64::from(h) - i64::from(nh)) / 2;
        imageops::overlay(&mut canvas, &scaled, ox, oy);
        img = canvas;
    }
    let (fx, fy) = (f64::from(nw) / f64::from(w), f64::from(nh) / f64::from(h));
    let ox = ((i64::from(w) - i64::from(nw)) / 2) as f64;
    let oy = ((i64::from(h) - i64::from(nh)) / 2) as f64;
    let boxes = item
        .boxes
        .iter()
        .filter_map(|a| {
            let b = a.bbox;
            let b = if flip {
                BBox::new(f64::from(w) - b.x2, b.y1, f64::from(w) - b.x1, b.y2)
            } else {
                b
            };
            let b = BBox::new(b.x1 * fx + ox, b.y1 * fy + oy, b.x2 * fx + ox, b.y2 * fy + oy)
                .clip(f64::from(w), f64::from(h));
            (b.width() >= 1.0 && b.height() >= 1.0).then_some(BoxAnnotation { bbox: b, ..*a })
        })
        .collect();
    (img, boxes)
}
