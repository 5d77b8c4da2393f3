//! PNG and PPM/PGM ingestion. 8-bit samples are divided by 255.
//!
//! A four-channel file is read as RGB+IR with IR in the fourth (alpha) slot,
//! which is also how [`save_png`] writes RGB+IR images.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage, RgbaImage};

use super::{concat_modalities, Modality, MultimodalImage, SingleChannelImage};
use crate::error::{Error, Result};

pub enum LoadedImage {
    Multi(MultimodalImage),
    Single(SingleChannelImage),
}

fn unit(v: u8) -> f64 {
    f64::from(v) / 255.0
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load(path: &Path) -> Result<LoadedImage> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img.color().channel_count() {
        1 | 2 => {
            let px = img.to_luma8().into_raw().into_iter().map(unit).collect();
            Ok(LoadedImage::Single(SingleChannelImage::new(h, w, px)?))
        }
        3 => {
            let px = img.to_rgb8().into_raw().into_iter().map(unit).collect();
            Ok(LoadedImage::Multi(MultimodalImage::new(h, w, Modality::Rgb, px)?))
        }
        4 => {
            let px = img.to_rgba8().into_raw().into_iter().map(unit).collect();
            Ok(LoadedImage::Multi(MultimodalImage::new(h, w, Modality::RgbIr, px)?))
        }
        n => Err(Error::Data(format!("{}: unsupported channel count {n}", path.display()))),
    }
}

pub fn load_multimodal(path: &Path) -> Result<MultimodalImage> {
    match load(path)? {
        LoadedImage::Multi(img) => Ok(img),
        LoadedImage::Single(_) => Err(Error::Data(format!(
            "{}: single-channel image where RGB or RGB+IR was expected",
            path.display()
        ))),
    }
}

/// Loads an RGB file and a separate single-channel IR file and fuses them.
pub fn load_pair(rgb_path: &Path, ir_path: &Path) -> Result<MultimodalImage> {
    let rgb = load_multimodal(rgb_path)?.rgb();
    let ir = match load(ir_path)? {
        LoadedImage::Single(ir) => ir,
        LoadedImage::Multi(m) => m.channel_plane(0),
    };
    concat_modalities(&rgb, &ir)
}

pub fn to_dynamic(img: &MultimodalImage) -> DynamicImage {
    let (h, w, _) = img.dims();
    let raw: Vec<u8> = img.pixels().iter().map(|&v| quantize(v)).collect();
    match img.modality() {
        Modality::Rgb => DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size")),
        Modality::RgbIr => DynamicImage::ImageRgba8(RgbaImage::from_raw(w as u32, h as u32, raw).expect("buffer size")),
    }
}

pub fn plane_to_gray(plane: &SingleChannelImage) -> GrayImage {
    let raw = plane.pixels().iter().map(|&v| quantize(v)).collect();
    GrayImage::from_raw(plane.width() as u32, plane.height() as u32, raw).expect("buffer size")
}

pub fn save_png(img: &MultimodalImage, path: &Path) -> Result<()> {
    to_dynamic(img).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_at_8_bit_precision() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<f64> = (0..4 * 3 * 4).map(|i| (i * 5 % 256) as f64 / 255.0).collect();
        let img = MultimodalImage::new(4, 3, Modality::RgbIr, px).unwrap();
        let path = dir.path().join("x.png");
        save_png(&img, &path).unwrap();
        let back = load_multimodal(&path).unwrap();
        assert_eq!(back.modality(), Modality::RgbIr);
        assert!(back.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn pgm_ir_fuses_with_ppm_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = RgbImage::from_fn(5, 4, |x, y| image::Rgb([x as u8 * 40, y as u8 * 50, 7]));
        let ir = GrayImage::from_fn(5, 4, |x, y| image::Luma([(x + y) as u8 * 30]));
        let (rp, ip) = (dir.path().join("a.ppm"), dir.path().join("a.pgm"));
        rgb.save(&rp).unwrap();
        ir.save(&ip).unwrap();
        let fused = load_pair(&rp, &ip).unwrap();
        assert_eq!(fused.dims(), (4, 5, 4));
        assert_eq!(fused.get(2, 3, 3), 150.0 / 255.0);
        assert_eq!(fused.get(2, 3, 0), 120.0 / 255.0);
    }
}
