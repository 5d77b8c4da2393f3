//! Multimodal images: channel fusion, bilinear resizing and tiling.
//!
//! Pixels are stored row-major, channel-last, as f64 in `[0, 1]`.

pub mod dataset;
pub mod io;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Rgb,
    RgbIr,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::RgbIr => 4,
        }
    }

    pub fn from_channels(channels: usize) -> Option<Self> {
        match channels {
            3 => Some(Modality::Rgb),
            4 => Some(Modality::RgbIr),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::RgbIr => "rgb_ir",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "rgb_ir" => Ok(Modality::RgbIr),
            other => Err(Error::Config(format!("unknown modality `{other}` (expected rgb or rgb_ir)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalImage {
    height: usize,
    width: usize,
    modality: Modality,
    pixels: Vec<f64>,
}

impl MultimodalImage {
    pub fn new(height: usize, width: usize, modality: Modality, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract("image dimensions must be positive"));
        }
        let c = modality.channels();
        if pixels.len() != height * width * c {
            return Err(Error::contract(format!(
                "{height}x{width}x{c} image needs {} pixels, got {}",
                height * width * c,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::contract(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            modality,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, modality: Modality, value: f64) -> Result<Self> {
        Self::new(height, width, modality, vec![value; height * width * modality.channels()])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.modality.channels()
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels())
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels() + c]
    }

    /// Sets one pixel value, clamped to `[0, 1]`.
    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let ch = self.channels();
        self.pixels[(y * self.width + x) * ch + c] = value.clamp(0.0, 1.0);
    }

    pub fn channel_plane(&self, c: usize) -> SingleChannelImage {
        let ch = self.channels();
        SingleChannelImage {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().skip(c).step_by(ch).copied().collect(),
        }
    }

    /// The RGB channels alone.
    pub fn rgb(&self) -> MultimodalImage {
        if self.modality == Modality::Rgb {
            return self.clone();
        }
        let pixels = self.pixels.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
        MultimodalImage {
            height: self.height,
            width: self.width,
            modality: Modality::Rgb,
            pixels,
        }
    }

    /// The image converted to `modality`; dropping IR is allowed, inventing
    /// it is not.
    pub fn with_modality(&self, modality: Modality) -> Result<MultimodalImage> {
        match (self.modality, modality) {
            (a, b) if a == b => Ok(self.clone()),
            (Modality::RgbIr, Modality::Rgb) => Ok(self.rgb()),
            _ => Err(Error::Data("cannot derive an rgb_ir image from rgb data".into())),
        }
    }

    pub fn max_abs_diff(&self, other: &MultimodalImage) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<MultimodalImage> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::Tiling(format!(
                "crop {h}x{w} at ({y0}, {x0}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let c = self.channels();
        let mut pixels = Vec::with_capacity(h * w * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            pixels.extend_from_slice(&self.pixels[start..start + w * c]);
        }
        Ok(MultimodalImage {
            height: h,
            width: w,
            modality: self.modality,
            pixels,
        })
    }
}

/// One-channel plane, used for standalone IR images.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleChannelImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl SingleChannelImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width || height == 0 || width == 0 {
            return Err(Error::contract(format!(
                "{height}x{width} plane needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::contract(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }
}

/// Channel-wise concatenation `x = x_rgb ⊕ x_ir`, producing `[R, G, B, IR]`.
pub fn concat_modalities(rgb: &MultimodalImage, ir: &SingleChannelImage) -> Result<MultimodalImage> {
    if rgb.modality != Modality::Rgb || rgb.height != ir.height || rgb.width != ir.width {
        return Err(Error::Fusion {
            rgb: rgb.dims(),
            ir: (ir.height, ir.width, 1),
        });
    }
    let mut pixels = Vec::with_capacity(rgb.pixels.len() / 3 * 4);
    for (px, &t) in rgb.pixels.chunks_exact(3).zip(&ir.pixels) {
        pixels.extend_from_slice(px);
        pixels.push(t);
    }
    Ok(MultimodalImage {
        height: rgb.height,
        width: rgb.width,
        modality: Modality::RgbIr,
        pixels,
    })
}

/// Bilinear resize with corner-aligned sampling: output corners land exactly
/// on input corners.
pub fn resize_bilinear(img: &MultimodalImage, new_h: usize, new_w: usize) -> Result<MultimodalImage> {
    if new_h < 2 || new_w < 2 {
        return Err(Error::contract(format!("resize target {new_h}x{new_w} must be at least 2x2")));
    }
    let (h, w, c) = img.dims();
    let coords = |out: usize, len: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|i| {
                let s = (i * (len - 1)) as f64 / (out - 1) as f64;
                let i0 = (s.floor() as usize).min(len - 1);
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = coords(new_h, h);
    let xs = coords(new_w, w);
    let mut pixels = Vec::with_capacity(new_h * new_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                // a + (b - a)·f keeps constant fields exact.
                let (a, b) = (img.get(y0, x0, ch), img.get(y0, x1, ch));
                let (cc, d) = (img.get(y1, x0, ch), img.get(y1, x1, ch));
                let top = a + (b - a) * fx;
                let bottom = cc + (d - cc) * fx;
                pixels.push((top + (bottom - top) * fy).clamp(0.0, 1.0));
            }
        }
    }
    MultimodalImage::new(new_h, new_w, img.modality, pixels)
}

/// Number of tiles [`tile`] produces along one axis.
pub fn tiles_along(len: usize, tile: usize, stride: usize) -> usize {
    (len - tile) / stride + 1
}

/// Raster-order crops of size `tile x tile` taken every `stride` pixels.
pub fn tile(img: &MultimodalImage, tile: usize, stride: usize) -> Result<Vec<MultimodalImage>> {
    if stride == 0 || tile == 0 {
        return Err(Error::Tiling("tile and stride must be positive".into()));
    }
    if tile > img.height.min(img.width) {
        return Err(Error::Tiling(format!(
            "tile {tile} larger than {}x{} image",
            img.height, img.width
        )));
    }
    let (ny, nx) = (tiles_along(img.height, tile, stride), tiles_along(img.width, tile, stride));
    let mut out = Vec::with_capacity(ny * nx);
    for ty in 0..ny {
        for tx in 0..nx {
            out.push(img.crop(ty * stride, tx * stride, tile, tile)?);
        }
    }
    Ok(out)
}

/// Inverse of [`tile`]: pastes raster-ordered tiles back into an
/// `height x width` canvas. Every pixel must be covered.
pub fn assemble_tiles(tiles: &[MultimodalImage], height: usize, width: usize, stride: usize) -> Result<MultimodalImage> {
    let first = tiles.first().ok_or_else(|| Error::Tiling("no tiles to assemble".into()))?;
    let t = first.height;
    if stride == 0 || t > height.min(width) {
        return Err(Error::Tiling(format!("cannot assemble {t}px tiles into {height}x{width}")));
    }
    let (ny, nx) = (tiles_along(height, t, stride), tiles_along(width, t, stride));
    if tiles.len() != ny * nx {
        return Err(Error::Tiling(format!("expected {} tiles, got {}", ny * nx, tiles.len())));
    }
    let c = first.channels();
    let mut pixels = vec![0.0; height * width * c];
    let mut covered = vec![false; height * width];
    for (k, tile) in tiles.iter().enumerate() {
        if tile.height != t || tile.width != t || tile.modality != first.modality {
            return Err(Error::Tiling(format!("tile {k} differs in shape or modality")));
        }
        let (y0, x0) = ((k / nx) * stride, (k % nx) * stride);
        for y in 0..t {
            let dst = ((y0 + y) * width + x0) * c;
            pixels[dst..dst + t * c].copy_from_slice(&tile.pixels[y * t * c..(y + 1) * t * c]);
            covered[(y0 + y) * width + x0..(y0 + y) * width + x0 + t].fill(true);
        }
    }
    if let Some(gap) = covered.iter().position(|c| !c) {
        return Err(Error::Tiling(format!(
            "pixel ({}, {}) not covered by any tile",
            gap / width,
            gap % width
        )));
    }
    MultimodalImage::new(height, width, first.modality, pixels)
}

/// Resize-then-tile data expansion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expansion {
    pub resize_to: usize,
    pub tile: usize,
    pub stride: usize,
}

impl Default for Expansion {
    fn default() -> Self {
        Self {
            resize_to: 512,
            tile: 256,
            stride: 128,
        }
    }
}

impl Expansion {
    pub fn apply(&self, img: &MultimodalImage) -> Result<Vec<MultimodalImage>> {
        let resized = if img.height == self.resize_to && img.width == self.resize_to {
            img.clone()
        } else {
            resize_bilinear(img, self.resize_to, self.resize_to)?
        };
        tile(&resized, self.tile, self.stride)
    }

    pub fn tiles_per_image(&self) -> usize {
        let n = tiles_along(self.resize_to, self.tile, self.stride);
        n * n
    }
}
