//! Composite grid image of all of a patient's node patches, each tile tagged
//! with its `N{i}` label.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{GrayImage, ImageEncoder, Luma};
use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_json;
use crate::error::{Error, Result};
use crate::report::{NodeLabel, PatientRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MontageConfig {
    pub tile_px: u32,
    pub label_margin_px: u32,
    pub label_glyph_height_px: u32,
    pub background_gray: u8,
}

impl Default for MontageConfig {
    fn default() -> Self {
        MontageConfig {
            tile_px: 128,
            label_margin_px: 4,
            label_glyph_height_px: 12,
            background_gray: 0,
        }
    }
}

impl MontageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_px < 32 {
            return Err(Error::config(format!("tile_px {} < 32", self.tile_px)));
        }
        if self.label_glyph_height_px == 0 || 2 * self.label_glyph_height_px >= self.tile_px {
            return Err(Error::config(format!(
                "label_glyph_height_px {} must be in 1..tile_px/2",
                self.label_glyph_height_px
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MontageImage {
    pub patient_id: String,
    pub rows: u32,
    pub cols: u32,
    pub tile_px: u32,
    pub pixels: GrayImage,
    pub tile_map: BTreeMap<NodeLabel, (u32, u32)>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    patient_id: &'a str,
    rows: u32,
    cols: u32,
    tile_px: u32,
    tile_map: BTreeMap<String, [u32; 2]>,
}

impl MontageImage {
    /// PNG with only IHDR/IDAT/IEND chunks.
    pub fn png_bytes(&self) -> Vec<u8> {
        encode_png(&self.pixels)
    }

    pub fn sidecar_json(&self) -> String {
        let sidecar = Sidecar {
            patient_id: &self.patient_id,
            rows: self.rows,
            cols: self.cols,
            tile_px: self.tile_px,
            tile_map: self
                .tile_map
                .iter()
                .map(|(l, &(r, c))| (l.to_string(), [r, c]))
                .collect(),
        };
        to_canonical_json(&sidecar).expect("sidecar serializes")
    }

    /// Pixel bounds `(x0, y0)` of the tile at grid cell `(row, col)`.
    pub fn tile_origin(&self, row: u32, col: u32) -> (u32, u32) {
        (col * self.tile_px, row * self.tile_px)
    }
}

/// Near-square grid for `k` tiles: `cols = ceil(sqrt(k))`, `rows = ceil(k / cols)`.
pub fn layout_grid(k: u32) -> Result<(u32, u32)> {
    if k == 0 {
        return Err(Error::validation("cannot lay out zero tiles"));
    }
    let mut cols = (k as f64).sqrt() as u32;
    while cols * cols < k {
        cols += 1;
    }
    while cols > 1 && (cols - 1) * (cols - 1) >= k {
        cols -= 1;
    }
    let rows = k.div_ceil(cols);
    Ok((rows, cols))
}

pub fn build_montage(patient: &PatientRecord, config: &MontageConfig) -> Result<MontageImage> {
    config.validate()?;
    let k = patient.node_count();
    if k == 0 {
        return Err(Error::validation(format!("patient {} has no node patches", patient.patient_id)));
    }
    for (i, patch) in patient.patches.iter().enumerate() {
        if patch.index != i as u32 + 1 {
            return Err(Error::validation(format!(
                "patient {}: patch indices must be contiguous from 1",
                patient.patient_id
            )));
        }
        if patch.image.width() == 0 || patch.image.height() == 0 {
            return Err(Error::Input(format!("patch {} of {} is empty", patch.label(), patient.patient_id)));
        }
    }
    let (rows, cols) = layout_grid(k)?;
    let t = config.tile_px;
    let mut canvas = GrayImage::from_pixel(cols * t, rows * t, Luma([config.background_gray]));
    let mut tile_map = BTreeMap::new();
    for (i, patch) in patient.patches.iter().enumerate() {
        let (r, c) = (i as u32 / cols, i as u32 % cols);
        let mut tile = resize_bilinear(&patch.image, t, t);
        draw_label(&mut tile, &patch.label().to_string(), config);
        image::imageops::replace(&mut canvas, &tile, (c * t) as i64, (r * t) as i64);
        tile_map.insert(patch.label(), (r, c));
    }
    Ok(MontageImage {
        patient_id: patient.patient_id.clone(),
        rows,
        cols,
        tile_px: t,
        pixels: canvas,
        tile_map,
    })
}

/// Bilinear resampling with pixel-centre alignment and edge clamping.
/// Aspect ratio is not preserved.
pub fn resize_bilinear(src: &GrayImage, width: u32, height: u32) -> GrayImage {
    let (sw, sh) = src.dimensions();
    let map = |d: u32, dst: u32, s: u32| -> (u32, u32, f64) {
        let f = ((d as f64 + 0.5) * s as f64 / dst as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let lo = f.floor() as u32;
        let hi = (lo + 1).min(s - 1);
        (lo, hi, f - lo as f64)
    };
    let xs: Vec<_> = (0..width).map(|x| map(x, width, sw)).collect();
    GrayImage::from_fn(width, height, |x, y| {
        let (y0, y1, wy) = map(y, height, sh);
        let (x0, x1, wx) = xs[x as usize];
        let p = |xx, yy| src.get_pixel(xx, yy).0[0] as f64;
        let top = p(x0, y0) * (1.0 - wx) + p(x1, y0) * wx;
        let bottom = p(x0, y1) * (1.0 - wx) + p(x1, y1) * wx;
        let v = top * (1.0 - wy) + bottom * wy;
        Luma([(v + 0.5).floor().clamp(0.0, 255.0) as u8])
    })
}

const GLYPH_W: u32 = 5;
const GLYPH_H: u32 = 7;

fn glyph(ch: char) -> Option<[u8; 7]> {
    Some(match ch {
        'N' => [0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001, 0b10001],
        '0' => [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
        '1' => [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        '2' => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
        '3' => [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
        '4' => [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
        '5' => [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
        '6' => [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
        '7' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
        '8' => [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
        '9' => [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
        _ => return None,
    })
}

/// Size in pixels of the black backing box drawn behind a label.
pub fn label_box(text: &str, config: &MontageConfig) -> (u32, u32) {
    let gh = config.label_glyph_height_px;
    let gw = (GLYPH_W * gh + GLYPH_H / 2) / GLYPH_H;
    let gap = (gh / GLYPH_H).max(1);
    let n = text.chars().count() as u32;
    let text_w = n * gw + n.saturating_sub(1) * gap;
    (text_w + 2, gh + 2)
}

/// Renders `text` at the top-left corner: white 5x7 glyphs scaled by
/// nearest neighbour over a black box, clipped to the tile.
fn draw_label(tile: &mut GrayImage, text: &str, config: &MontageConfig) {
    let (w, h) = tile.dimensions();
    let gh = config.label_glyph_height_px;
    let gw = (GLYPH_W * gh + GLYPH_H / 2) / GLYPH_H;
    let gap = (gh / GLYPH_H).max(1);
    let (box_w, box_h) = label_box(text, config);
    let m = config.label_margin_px;
    for y in m..(m + box_h).min(h) {
        for x in m..(m + box_w).min(w) {
            tile.put_pixel(x, y, Luma([0]));
        }
    }
    let mut x0 = m + 1;
    for ch in text.chars() {
        if let Some(rows) = glyph(ch) {
            for gy in 0..gh {
                let bits = rows[(gy * GLYPH_H / gh) as usize];
                for gx in 0..gw {
                    let sx = gx * GLYPH_W / gw;
                    if bits & (1 << (GLYPH_W - 1 - sx)) != 0 {
                        let (px, py) = (x0 + gx, m + 1 + gy);
                        if px < w && py < h {
                            tile.put_pixel(px, py, Luma([255]));
                        }
                    }
                }
            }
        }
        x0 += gw + gap;
    }
}

pub fn encode_png(img: &GrayImage) -> Vec<u8> {
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::L8)
        .expect("in-memory PNG encode");
    buf
}

pub fn decode_gray(bytes: &[u8]) -> Result<GrayImage> {
    image::load_from_memory(bytes)
        .map(|i| i.to_luma8())
        .map_err(|e| Error::Input(e.to_string()))
}

/// Loads `{index:03}.png` patches from `dir`; indices must run contiguously from 001.
pub fn load_patches(dir: &Path) -> Result<Vec<GrayImage>> {
    let mut indexed = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::Input(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let Some(stem) = name.strip_suffix(".png") else { continue };
        let index: u32 = match stem.parse() {
            Ok(i) if stem.len() >= 3 && i > 0 => i,
            _ => return Err(Error::Input(format!("unexpected patch file name {}", path.display()))),
        };
        indexed.push((index, path));
    }
    indexed.sort();
    let mut images = Vec::with_capacity(indexed.len());
    for (expected, (index, path)) in (1u32..).zip(&indexed) {
        if *index != expected {
            return Err(Error::Input(format!(
                "{}: patch {:03}.png missing (indices must be contiguous from 001)",
                dir.display(),
                expected
            )));
        }
        let bytes = fs::read(path)?;
        let img = decode_gray(&bytes)
            .map_err(|e| Error::Input(format!("undecodable patch {}: {e}", path.display())))?;
        images.push(img);
    }
    Ok(images)
}
