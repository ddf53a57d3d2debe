//! Grayscale images, crops, letterbox resizing and overlays.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::table::{pair_key, BBox, RelationLabel, RelationMap, Table};

pub const BACKGROUND: u8 = 255;

/// Row-major 8-bit image, 0 is ink and 255 is paper.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width as usize * height as usize {
            return Err(Error::InvalidArgument(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = v;
    }

    /// Fills an inclusive box, clipped to the image.
    pub fn fill_rect(&mut self, b: BBox, v: u8) {
        if self.width == 0 || self.height == 0 || b.x1 >= self.width || b.y1 >= self.height {
            return;
        }
        let x2 = b.x2.min(self.width - 1);
        let y2 = b.y2.min(self.height - 1);
        for y in b.y1..=y2 {
            for x in b.x1..=x2 {
                self.set(x, y, v);
            }
        }
    }

    pub fn ink_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p < BACKGROUND).count()
    }

    /// Network input: ink maps to 1, paper to 0.
    pub fn to_unit_ink(&self) -> Vec<f32> {
        self.pixels
            .iter()
            .map(|&p| f32::from(BACKGROUND - p) / 255.0)
            .collect()
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        encode_png(self.width, self.height, png::ColorType::Grayscale, &self.pixels)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let mut decoder = png::Decoder::new(Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info()?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::InvalidArgument("png too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf)?;
        buf.truncate(info.buffer_size());
        let luma = |r: u8, g: u8, b: u8| {
            ((299 * u32::from(r) + 587 * u32::from(g) + 114 * u32::from(b) + 500) / 1000) as u8
        };
        let pixels = match info.color_type {
            png::ColorType::Grayscale => buf,
            png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).map(|p| p[0]).collect(),
            png::ColorType::Rgb => buf.chunks_exact(3).map(|p| luma(p[0], p[1], p[2])).collect(),
            png::ColorType::Rgba => buf.chunks_exact(4).map(|p| luma(p[0], p[1], p[2])).collect(),
            png::ColorType::Indexed => {
                return Err(Error::InvalidArgument("unexpanded palette image".into()))
            }
        };
        Self::new(info.width, info.height, pixels)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn from_gray(g: &GrayImage) -> Self {
        Self {
            width: g.width,
            height: g.height,
            pixels: g.pixels.iter().map(|&p| [p, p, p]).collect(),
        }
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < self.width && (y as u32) < self.height {
            let w = self.width as usize;
            self.pixels[y as usize * w + x as usize] = c;
        }
    }

    /// Bresenham segment with a square pen of side `2 * r + 1`.
    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), r: i64, c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            for oy in -r..=r {
                for ox in -r..=r {
                    self.put(x + ox, y + oy, c);
                }
            }
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn outline(&mut self, b: BBox, c: [u8; 3]) {
        let (x1, y1, x2, y2) = (b.x1 as i64, b.y1 as i64, b.x2 as i64, b.y2 as i64);
        self.line((x1, y1), (x2, y1), 0, c);
        self.line((x1, y2), (x2, y2), 0, c);
        self.line((x1, y1), (x1, y2), 0, c);
        self.line((x2, y1), (x2, y2), 0, c);
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let flat: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        encode_png(self.width, self.height, png::ColorType::Rgb, &flat)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png()?).map_err(|e| Error::io(path, e))
    }
}

fn encode_png(width: u32, height: u32, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header()?;
        w.write_image_data(data)?;
    }
    Ok(out)
}

pub fn crop(image: &GrayImage, b: BBox) -> Result<GrayImage> {
    if b.is_degenerate() || !b.fits_in(image.width, image.height) {
        return Err(Error::OutOfBounds {
            bbox: b.into(),
            width: image.width,
            height: image.height,
        });
    }
    let w = image.width as usize;
    let mut pixels = Vec::with_capacity(b.width() as usize * b.height() as usize);
    for y in b.y1..=b.y2 {
        let row = y as usize * w;
        pixels.extend_from_slice(&image.pixels[row + b.x1 as usize..=row + b.x2 as usize]);
    }
    GrayImage::new(b.width(), b.height(), pixels)
}

/// Crop of the tightest box containing both cells.
pub fn union_crop(image: &GrayImage, a: BBox, b: BBox) -> Result<GrayImage> {
    for bx in [a, b] {
        if bx.is_degenerate() || !bx.fits_in(image.width, image.height) {
            return Err(Error::OutOfBounds {
                bbox: bx.into(),
                width: image.width,
                height: image.height,
            });
        }
    }
    crop(image, a.union(&b))
}

/// Triangle-filter taps for resampling `src` samples onto `dst`, widened by
/// the scale factor when shrinking so every source pixel contributes.
fn resample_taps(src: usize, dst: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = src as f64 / dst as f64;
    let support = scale.max(1.0);
    (0..dst)
        .map(|j| {
            let center = (j as f64 + 0.5) * scale;
            let lo = ((center - support).floor().max(0.0)) as usize;
            let hi = ((center + support).ceil() as usize).min(src);
            let mut w: Vec<f64> = (lo..hi)
                .map(|i| (1.0 - ((i as f64 + 0.5 - center) / support).abs()).max(0.0))
                .collect();
            let total: f64 = w.iter().sum();
            if total > 0.0 {
                w.iter_mut().for_each(|v| *v /= total);
            } else {
                let nearest = (center as usize).min(src - 1);
                return (nearest, vec![1.0]);
            }
            (lo, w)
        })
        .collect()
}

fn scale_to(image: &GrayImage, out_w: usize, out_h: usize) -> GrayImage {
    let (w, h) = (image.width as usize, image.height as usize);
    let tx = resample_taps(w, out_w);
    let ty = resample_taps(h, out_h);
    let mut horiz = vec![0.0f64; h * out_w];
    for y in 0..h {
        let row = &image.pixels[y * w..(y + 1) * w];
        for (j, (lo, taps)) in tx.iter().enumerate() {
            horiz[y * out_w + j] = taps.iter().enumerate().map(|(t, wt)| wt * f64::from(row[lo + t])).sum();
        }
    }
    let mut pixels = Vec::with_capacity(out_w * out_h);
    for (lo, taps) in &ty {
        for x in 0..out_w {
            let v: f64 = taps.iter().enumerate().map(|(t, wt)| wt * horiz[(lo + t) * out_w + x]).sum();
            // Anything short of pure paper keeps at least one level of ink.
            let q = if v >= 255.0 - 1e-6 { 255 } else { v.round().clamp(0.0, 254.0) as u8 };
            pixels.push(q);
        }
    }
    GrayImage {
        width: out_w as u32,
        height: out_h as u32,
        pixels,
    }
}

/// Letterboxes `image` into `target_h x target_w`: content anchored top-left,
/// shrunk by `min(target_h / h, target_w / w)` only when it does not fit,
/// padding with paper on the right and bottom.
pub fn resize_pad(image: &GrayImage, target_h: u32, target_w: u32) -> Result<GrayImage> {
    if image.width == 0 || image.height == 0 {
        return Err(Error::EmptyImage);
    }
    if target_h == 0 || target_w == 0 {
        return Err(Error::InvalidArgument("target size must be at least 1x1".into()));
    }
    let content = if image.height <= target_h && image.width <= target_w {
        image.clone()
    } else {
        let ratio = (f64::from(target_h) / f64::from(image.height)).min(f64::from(target_w) / f64::from(image.width));
        let ow = ((f64::from(image.width) * ratio).round() as u32).clamp(1, target_w);
        let oh = ((f64::from(image.height) * ratio).round() as u32).clamp(1, target_h);
        scale_to(image, ow as usize, oh as usize)
    };
    let mut out = GrayImage::filled(target_w, target_h, BACKGROUND);
    for y in 0..content.height {
        let src = &content.pixels[(y * content.width) as usize..((y + 1) * content.width) as usize];
        let dst = (y * target_w) as usize;
        out.pixels[dst..dst + content.width as usize].copy_from_slice(src);
    }
    Ok(out)
}

pub const BOX_COLOR: [u8; 3] = [40, 90, 220];
pub const HORIZONTAL_COLOR: [u8; 3] = [0, 170, 0];
pub const VERTICAL_COLOR: [u8; 3] = [220, 0, 0];
pub const MISPREDICTION_COLOR: [u8; 3] = [230, 0, 230];

/// Draws cell boxes and relation edges between box centers. With
/// `predictions`, predicted edges are drawn and any pair whose prediction
/// disagrees with the table's relations is drawn in the misprediction color.
pub fn render_overlay(image: &GrayImage, table: &Table, predictions: Option<&RelationMap>) -> RgbImage {
    let mut out = RgbImage::from_gray(image);
    for c in &table.cells {
        out.outline(table.operative_box(c), BOX_COLOR);
    }
    let center = |id: u32| {
        table.cell(id).map(|c| {
            let (x, y) = table.operative_box(c).center2();
            (x / 2, y / 2)
        })
    };
    let color = |l: RelationLabel| match l {
        RelationLabel::Horizontal => Some(HORIZONTAL_COLOR),
        RelationLabel::Vertical => Some(VERTICAL_COLOR),
        RelationLabel::NoConnection => None,
    };
    let mut edges: Vec<((u32, u32), [u8; 3])> = Vec::new();
    match predictions {
        None => {
            for (&k, &l) in &table.relations {
                edges.extend(color(l).map(|c| (k, c)));
            }
        }
        Some(pred) => {
            let mut keys: Vec<(u32, u32)> = pred.keys().chain(table.relations.keys()).map(|&(a, b)| pair_key(a, b)).collect();
            keys.sort_unstable();
            keys.dedup();
            // Mispredictions last so they stay visible where lines cross.
            let mut wrong = Vec::new();
            for k in keys {
                let p = pred.get(&k).copied().unwrap_or(RelationLabel::NoConnection);
                if p != table.relation(k.0, k.1) {
                    wrong.push((k, MISPREDICTION_COLOR));
                } else if let Some(c) = color(p) {
                    edges.push((k, c));
                }
            }
            edges.extend(wrong);
        }
    }
    for ((a, b), c) in edges {
        if let (Some(p), Some(q)) = (center(a), center(b)) {
            out.line(p, q, 1, c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::derive_relations;
    use crate::table::tests::grid_table;
    use proptest::prelude::*;

    fn ramp(w: u32, h: u32) -> GrayImage {
        GrayImage::new(w, h, (0..w * h).map(|i| (i * 7 % 256) as u8).collect()).unwrap()
    }

    #[test]
    fn crop_identity_single_pixel_and_composition() {
        let img = ramp(20, 15);
        assert_eq!(crop(&img, BBox::new(0, 0, 19, 14)).unwrap(), img);
        let one = crop(&img, BBox::new(3, 4, 3, 4)).unwrap();
        assert_eq!((one.width(), one.height(), one.get(0, 0)), (1, 1, img.get(3, 4)));
        let outer = crop(&img, BBox::new(2, 3, 15, 12)).unwrap();
        let nested = crop(&outer, BBox::new(1, 2, 5, 6)).unwrap();
        assert_eq!(nested, crop(&img, BBox::new(3, 5, 7, 9)).unwrap());
        assert!(matches!(crop(&img, BBox::new(0, 0, 20, 3)), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn union_crop_formula() {
        let img = ramp(50, 20);
        let a = BBox::new(10, 5, 20, 15);
        let b = BBox::new(30, 5, 40, 15);
        let u = union_crop(&img, a, b).unwrap();
        assert_eq!(u, crop(&img, BBox::new(10, 5, 40, 15)).unwrap());
        assert_eq!(union_crop(&img, a, a).unwrap(), crop(&img, a).unwrap());
        let inner = BBox::new(12, 6, 14, 8);
        assert_eq!(union_crop(&img, inner, a).unwrap(), crop(&img, a).unwrap());
    }

    #[test]
    fn resize_pad_identity() {
        let img = ramp(84, 84);
        assert_eq!(resize_pad(&img, 84, 84).unwrap(), img);
    }

    #[test]
    fn small_inputs_are_only_padded() {
        let img = ramp(42, 42);
        let out = resize_pad(&img, 84, 84).unwrap();
        for y in 0..84 {
            for x in 0..84 {
                let want = if x < 42 && y < 42 { img.get(x, y) } else { BACKGROUND };
                assert_eq!(out.get(x, y), want);
            }
        }
    }

    #[test]
    fn tall_input_shrinks_by_min_ratio() {
        let img = GrayImage::filled(100, 200, 0);
        let out = resize_pad(&img, 84, 84).unwrap();
        // ratio = min(84/200, 84/100) = 0.42 -> 84 rows by 42 columns of content.
        for y in 0..84 {
            assert_eq!(out.get(41, y), 0);
            assert_eq!(out.get(42, y), BACKGROUND);
        }
        assert!(matches!(resize_pad(&GrayImage::filled(0, 3, 0), 84, 84), Err(Error::EmptyImage)));
    }

    #[test]
    fn downscale_preserves_uniform_tones() {
        let img = GrayImage::filled(300, 170, 128);
        let out = resize_pad(&img, 84, 84).unwrap();
        assert_eq!(out.get(10, 10), 128);
        assert_eq!(out.get(83, 83), BACKGROUND);
    }

    #[test]
    fn png_round_trip() {
        let img = ramp(13, 7);
        assert_eq!(GrayImage::from_png(&img.to_png().unwrap()).unwrap(), img);
    }

    #[test]
    fn overlay_edges_and_mispredictions() {
        let t = derive_relations(&grid_table(1, 2)).unwrap();
        let paper = GrayImage::filled(20, 10, BACKGROUND);
        let mut no_edges = t.clone();
        no_edges.relations.clear();
        let boxes_only = render_overlay(&paper, &no_edges, None);
        assert!(boxes_only.pixels.iter().all(|&p| p == BOX_COLOR || p == [255; 3]));

        let truth = render_overlay(&paper, &t, None);
        assert_eq!(truth.get(10, 4), HORIZONTAL_COLOR);

        let mut wrong = RelationMap::new();
        wrong.insert((0, 1), RelationLabel::Vertical);
        let out = render_overlay(&paper, &t, Some(&wrong));
        assert_eq!(out.get(10, 4), MISPREDICTION_COLOR);
        assert_eq!(out, render_overlay(&paper, &t, Some(&wrong)));
    }

    proptest! {
        #[test]
        fn resize_pad_shape_and_ink(
            w in 1u32..1500, h in 1u32..1500,
            th in 1u32..100, tw in 1u32..100,
            ix in 0.0f64..1.0, iy in 0.0f64..1.0,
        ) {
            let mut img = GrayImage::filled(w, h, BACKGROUND);
            img.set((ix * w as f64) as u32, (iy * h as f64) as u32, 0);
            let out = resize_pad(&img, th, tw).unwrap();
            prop_assert_eq!((out.height(), out.width()), (th, tw));
            prop_assert!(out.ink_count() > 0);
        }

        #[test]
        fn union_crop_commutes(ax in 0u32..30, ay in 0u32..20, bx in 0u32..30, by in 0u32..20) {
            let img = ramp(40, 30);
            let a = BBox::new(ax, ay, ax + 9, ay + 9);
            let b = BBox::new(bx, by, bx + 5, by + 3);
            prop_assert_eq!(union_crop(&img, a, b).unwrap(), union_crop(&img, b, a).unwrap());
        }
    }
}
