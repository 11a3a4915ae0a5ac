//! Grouped bar charts rendered straight into an RGB raster.

use std::path::Path;

use font8x8::legacy::BASIC_LEGACY;
use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const INK: Rgb<u8> = Rgb([32, 32, 32]);
const GRID: Rgb<u8> = Rgb([220, 220, 220]);

/// Series colours, cycled when there are more series than entries.
pub const PALETTE: [Rgb<u8>; 8] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
    Rgb([227, 119, 194]),
    Rgb([127, 127, 127]),
];

const GLYPH: u32 = 8;
const BAR: u32 = 14;
const GROUP_GAP: u32 = 16;
const LEFT: u32 = 56;
const RIGHT: u32 = 24;
const PLOT_H: u32 = 240;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    /// One value per group; `None` leaves the slot empty.
    pub values: Vec<Option<f64>>,
}

/// Bars grouped along the x axis, one colour per series, y in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BarChart {
    pub title: String,
    pub groups: Vec<String>,
    pub series: Vec<Series>,
}

/// Draw `text` with its top-left corner at `(x, y)`, clipped to the image.
pub fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, scale: u32, color: Rgb<u8>) {
    for (i, ch) in text.chars().enumerate() {
        let code = if ch.is_ascii() { ch as usize } else { b'?' as usize };
        let glyph = BASIC_LEGACY[code];
        let x0 = x + i as u32 * GLYPH * scale;
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8u32 {
                if bits >> col & 1 == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let (px, py) = (x0 + col * scale + dx, y + row as u32 * scale + dy);
                        if px < img.width() && py < img.height() {
                            img.put_pixel(px, py, color);
                        }
                    }
                }
            }
        }
    }
}

fn fill(img: &mut RgbImage, x: u32, y: u32, w: u32, h: u32, color: Rgb<u8>) {
    for py in y..(y + h).min(img.height()) {
        for px in x..(x + w).min(img.width()) {
            img.put_pixel(px, py, color);
        }
    }
}

fn text_width(s: &str, scale: u32) -> u32 {
    s.chars().count() as u32 * GLYPH * scale
}

impl BarChart {
    pub fn color(i: usize) -> Rgb<u8> {
        PALETTE[i % PALETTE.len()]
    }

    fn check(&self) -> Result<()> {
        if self.groups.is_empty() || self.series.is_empty() {
            return Err(Error::Input(format!("chart {:?} has no data", self.title)));
        }
        if let Some(s) = self.series.iter().find(|s| s.values.len() != self.groups.len()) {
            return Err(Error::Input(format!(
                "series {:?} has {} values for {} groups",
                s.name,
                s.values.len(),
                self.groups.len()
            )));
        }
        Ok(())
    }

    pub fn render(&self) -> Result<RgbImage> {
        self.check()?;
        let n = self.series.len() as u32;
        let label_w = self.groups.iter().map(|g| text_width(g, 1)).max().unwrap_or(0);
        let group_w = (n * BAR).max(label_w) + GROUP_GAP;
        let legend_w: u32 = self.series.iter().map(|s| text_width(&s.name, 1) + 24).sum();
        let plot_w = group_w * self.groups.len() as u32;
        let width = (LEFT + plot_w + RIGHT)
            .max(LEFT + legend_w + RIGHT)
            .max(text_width(&self.title, 2) + 32);
        let top = 24 + 2 * GLYPH + 8 + GLYPH + 16;
        let height = top + PLOT_H + 3 * GLYPH;
        let mut img = RgbImage::from_pixel(width, height, WHITE);

        draw_text(&mut img, 16, 12, &self.title, 2, INK);
        let mut lx = LEFT;
        let ly = 12 + 2 * GLYPH + 10;
        for (i, s) in self.series.iter().enumerate() {
            fill(&mut img, lx, ly, GLYPH, GLYPH, Self::color(i));
            draw_text(&mut img, lx + GLYPH + 4, ly, &s.name, 1, INK);
            lx += text_width(&s.name, 1) + 24;
        }

        let y_of = |v: f64| top + PLOT_H - (v.clamp(0.0, 1.0) * f64::from(PLOT_H)).round() as u32;
        for tick in 0..=4 {
            let v = f64::from(tick) / 4.0;
            let y = y_of(v);
            fill(&mut img, LEFT, y, plot_w, 1, GRID);
            let label = format!("{v:.2}");
            draw_text(
                &mut img,
                LEFT - text_width(&label, 1) - 6,
                y.saturating_sub(GLYPH / 2),
                &label,
                1,
                INK,
            );
        }
        fill(&mut img, LEFT, top, 1, PLOT_H + 1, INK);
        fill(&mut img, LEFT, top + PLOT_H, plot_w, 1, INK);

        for (g, name) in self.groups.iter().enumerate() {
            let gx = LEFT + g as u32 * group_w + GROUP_GAP / 2;
            let bars_x = gx + (group_w - GROUP_GAP - n * BAR) / 2;
            for (i, s) in self.series.iter().enumerate() {
                if let Some(v) = s.values[g] {
                    let y = y_of(v);
                    fill(
                        &mut img,
                        bars_x + i as u32 * BAR,
                        y,
                        BAR - 2,
                        top + PLOT_H - y,
                        Self::color(i),
                    );
                }
            }
            let tx = gx + (group_w - GROUP_GAP).saturating_sub(text_width(name, 1)) / 2;
            draw_text(&mut img, tx, top + PLOT_H + 8, name, 1, INK);
        }
        Ok(img)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.render()?.save(path)?;
        Ok(())
    }
}
