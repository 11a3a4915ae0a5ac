//! Deterministic synthetic scans: coloured geometric glyphs on a textured
//! background, one glyph family per class.

use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BoxAnnotation, ClassTaxonomy, Dataset, ImageRecord, ImageSource};
use crate::bbox::BBox;

/// Parameters of [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_images: usize,
    pub num_classes: usize,
    pub image_size: u32,
    pub max_objects: usize,
    /// Glyph side lengths are drawn from `[min_object, max_object]` pixels.
    pub min_object: u32,
    pub max_object: u32,
    /// Allow glyphs to overlap each other.
    pub overlap: bool,
    /// Scanner domain whose colour shift is applied; `None` means unshifted.
    pub domain: Option<u32>,
    /// Id of the first image; later images count up from here.
    pub first_id: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_images: 8,
            num_classes: 4,
            image_size: 128,
            max_objects: 3,
            min_object: 24,
            max_object: 48,
            overlap: false,
            domain: None,
            first_id: 0,
        }
    }
}

/// Pixel values before any shift stay in this range, so a shift of at most
/// 48 per channel never clips and moves channel means by exactly the offset.
const BASE_MIN: u8 = 48;
const BASE_MAX: u8 = 207;

/// Per-channel additive offset emulating a scanner's colour response.
pub fn domain_offset(domain: u32) -> [i16; 3] {
    match domain {
        0 | 1 => [0, 0, 0],
        2 => [40, -16, -40],
        3 => [-40, 32, 24],
        d => {
            let k = (d as i16 * 37) % 97 - 48;
            [k, -k / 2, (k * 3) / 4]
        }
    }
}

const PALETTE: [[u8; 3]; 10] = [
    [200, 60, 60],
    [60, 190, 70],
    [70, 90, 205],
    [205, 190, 60],
    [180, 70, 190],
    [60, 185, 195],
    [205, 130, 60],
    [120, 200, 150],
    [150, 110, 60],
    [200, 200, 200],
];

fn inside_glyph(family: usize, u: f64, v: f64) -> bool {
    // (u, v) in [0, 1)^2 relative to the glyph box
    let (du, dv) = (u - 0.5, v - 0.5);
    match family {
        0 => true,
        1 => du * du + dv * dv <= 0.25,
        2 => {
            let r2 = du * du + dv * dv;
            r2 <= 0.25 && r2 >= 0.09
        }
        3 => du.abs() < 0.17 || dv.abs() < 0.17,
        4 => v >= 2.0 * du.abs(),
        5 => ((u + v) * 4.0).floor() as i64 % 2 == 0,
        6 => u < 0.2 || u > 0.8 || v < 0.2 || v > 0.8,
        _ => (du.abs() - dv.abs()).abs() < 0.15,
    }
}

fn background(rng: &mut ChaCha8Rng, size: u32) -> RgbImage {
    let tint: [f64; 3] = [
        rng.random_range(95.0..125.0),
        rng.random_range(95.0..125.0),
        rng.random_range(95.0..125.0),
    ];
    let (fx, fy) = (rng.random_range(0.02..0.08), rng.random_range(0.02..0.08));
    RgbImage::from_fn(size, size, |x, y| {
        let wave = 12.0 * ((x as f64 * fx).sin() + (y as f64 * fy).cos());
        let mut px = [0u8; 3];
        for (c, p) in px.iter_mut().enumerate() {
            let noise: f64 = rng.random_range(-10.0..10.0);
            *p = (tint[c] + wave + noise).clamp(BASE_MIN as f64, BASE_MAX as f64) as u8;
        }
        Rgb(px)
    })
}

/// Draw one glyph inside `b` and return the tight box of the pixels it covered.
fn draw_glyph(img: &mut RgbImage, class_id: usize, b: &BBox, shade: f64) -> Option<BBox> {
    let color = PALETTE[class_id % PALETTE.len()];
    let px = Rgb(color.map(|c| (c as f64 * shade).clamp(BASE_MIN as f64, BASE_MAX as f64) as u8));
    let family = class_id % 8;
    let (x1, y1, x2, y2) = (b.x1 as u32, b.y1 as u32, b.x2 as u32, b.y2 as u32);
    let (w, h) = ((x2 - x1) as f64, (y2 - y1) as f64);
    let (mut tx1, mut ty1, mut tx2, mut ty2) = (u32::MAX, u32::MAX, 0, 0);
    for y in y1..y2 {
        for x in x1..x2 {
            let u = ((x - x1) as f64 + 0.5) / w;
            let v = ((y - y1) as f64 + 0.5) / h;
            if inside_glyph(family, u, v) {
                img.put_pixel(x, y, px);
                tx1 = tx1.min(x);
                ty1 = ty1.min(y);
                tx2 = tx2.max(x + 1);
                ty2 = ty2.max(y + 1);
            }
        }
    }
    (tx1 < tx2 && ty1 < ty2).then(|| BBox::new(tx1 as f64, ty1 as f64, tx2 as f64, ty2 as f64))
}

fn apply_shift(img: &mut RgbImage, offset: [i16; 3]) {
    for px in img.pixels_mut() {
        for c in 0..3 {
            px.0[c] = (px.0[c] as i16 + offset[c]).clamp(0, 255) as u8;
        }
    }
}

/// Generate `spec.n_images` images with up to `spec.max_objects` glyphs each.
///
/// Geometry depends only on the seed; the domain shift is applied last, so
/// two domains with one seed share every box.
pub fn generate_synthetic(spec: &SynthSpec) -> Dataset {
    let taxonomy = ClassTaxonomy::synthetic(spec.num_classes.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.image_size.max(8);
    let max_side = spec.max_object.clamp(4, size);
    let min_side = spec.min_object.clamp(4, max_side);
    let mut dataset = Dataset::new(taxonomy);
    for i in 0..spec.n_images {
        let id = spec.first_id + i as u64;
        let mut img = background(&mut rng, size);
        let n_obj = rng.random_range(1..=spec.max_objects.max(1));
        let mut annotations: Vec<BoxAnnotation> = Vec::new();
        for _ in 0..n_obj {
            let class_id = rng.random_range(0..spec.num_classes.max(1));
            let shade = rng.random_range(0.85..1.0);
            for _attempt in 0..30 {
                let w = rng.random_range(min_side..=max_side);
                let h = rng.random_range(min_side..=max_side);
                let x = rng.random_range(0..=size - w);
                let y = rng.random_range(0..=size - h);
                let b = BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64);
                if !spec.overlap && annotations.iter().any(|a| a.bbox.intersection(&b) > 0.0) {
                    continue;
                }
                if let Some(bbox) = draw_glyph(&mut img, class_id, &b, shade) {
                    annotations.push(BoxAnnotation {
                        bbox,
                        class_id,
                        image_id: id,
                    });
                }
                break;
            }
        }
        if let Some(d) = spec.domain {
            apply_shift(&mut img, domain_offset(d));
        }
        dataset.images.push(ImageRecord {
            id,
            file_name: format!("{id:06}.png"),
            width: size,
            height: size,
            annotations,
            source: ImageSource::Memory(Arc::new(img)),
        });
    }
    dataset
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pixels(ds: &Dataset) -> Vec<Vec<u8>> {
        ds.images
            .iter()
            .map(|i| i.load_rgb().unwrap().as_raw().clone())
            .collect()
    }

    #[test]
    fn same_seed_identical() {
        let spec = SynthSpec::default();
        let (a, b) = (generate_synthetic(&spec), generate_synthetic(&spec));
        assert_eq!(pixels(&a), pixels(&b));
        let boxes = |d: &Dataset| d.annotations().copied().collect::<Vec<_>>();
        assert_eq!(boxes(&a), boxes(&b));
    }

    #[test]
    fn counts_bounded() {
        let ds = generate_synthetic(&SynthSpec {
            n_images: 8,
            max_objects: 3,
            ..SynthSpec::default()
        });
        assert_eq!(ds.len(), 8);
        assert!(ds.num_instances() <= 24);
        assert!(ds.images.iter().all(|i| !i.annotations.is_empty()));
    }

    #[test]
    fn domain_shift_moves_channel_means_by_offset() {
        let base = SynthSpec {
            domain: Some(1),
            ..SynthSpec::default()
        };
        let a = generate_synthetic(&base);
        let b = generate_synthetic(&SynthSpec {
            domain: Some(2),
            ..base
        });
        let boxes = |d: &Dataset| d.annotations().copied().collect::<Vec<_>>();
        assert_eq!(boxes(&a), boxes(&b));
        let mean = |d: &Dataset, c: usize| {
            let mut sum = 0.0;
            let mut n = 0.0;
            for img in &d.images {
                for px in img.load_rgb().unwrap().pixels() {
                    sum += px.0[c] as f64;
                    n += 1.0;
                }
            }
            sum / n
        };
        let (o1, o2) = (domain_offset(1), domain_offset(2));
        for c in 0..3 {
            let diff = mean(&b, c) - mean(&a, c);
            assert!((diff - (o2[c] - o1[c]) as f64).abs() < 1e-9, "channel {c}: {diff}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn boxes_inside_image(seed in 0u64..10_000, size in 32u32..160, max_objects in 1usize..6) {
            let ds = generate_synthetic(&SynthSpec {
                seed, image_size: size, max_objects, n_images: 3,
                min_object: 8, max_object: 40, overlap: seed % 2 == 0,
                ..SynthSpec::default()
            });
            for a in ds.annotations() {
                prop_assert!(a.bbox.is_valid());
                prop_assert!(a.bbox.x1 >= 0.0 && a.bbox.y1 >= 0.0);
                prop_assert!(a.bbox.x2 <= size as f64 && a.bbox.y2 <= size as f64);
            }
        }
    }
}
