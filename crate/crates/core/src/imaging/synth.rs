//! Synthetic correlated RGB+IR scenes with annotated rectangular objects.
//!
//! Each scene has a smooth low-frequency background and one to eight
//! rectangles. Object classes come in pairs that share an RGB signature and
//! differ only in their thermal offset, so the IR channel carries class
//! information that RGB alone cannot provide.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Modality, MultimodalImage};
use crate::error::{Error, Result};

pub const N_CLASSES: usize = 4;

const RGB_SIGNATURES: [[f64; 3]; 2] = [[0.85, 0.30, 0.20], [0.20, 0.40, 0.85]];
const HOT_OFFSET: f64 = 0.30;
const COLD_OFFSET: f64 = -0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub class: usize,
}

impl BoxAnnotation {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub boxes: Vec<BoxAnnotation>,
}

/// Rec. 601 luma.
pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn thermal(lum: f64) -> f64 {
    0.15 + 0.7 * lum
}

struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
}

impl Wave {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let sign = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        Wave {
            fy: rng.gen_range(0.3..2.0) * sign(rng),
            fx: rng.gen_range(0.3..2.0) * sign(rng),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    fn at(&self, v: f64, u: f64) -> f64 {
        (std::f64::consts::TAU * (self.fy * v + self.fx * u) + self.phase).sin()
    }
}

/// Generates one RGB+IR scene and its object annotations. Deterministic in
/// `seed`; `h` and `w` must be multiples of 16.
pub fn synth_pair(seed: u64, h: usize, w: usize) -> Result<(MultimodalImage, Annotations)> {
    if h == 0 || w == 0 || !h.is_multiple_of(16) || !w.is_multiple_of(16) {
        return Err(Error::contract(format!("synthetic scene {h}x{w} must use positive multiples of 16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.65));
    let waves: Vec<Wave> = (0..3).map(|_| Wave::random(&mut rng)).collect();
    let amps: Vec<[f64; 3]> = (0..3)
        .map(|_| {
            let a = rng.gen_range(0.04..0.12);
            std::array::from_fn(|_| a * rng.gen_range(0.6..1.0))
        })
        .collect();
    let ir_wave = Wave::random(&mut rng);
    let ir_amp = rng.gen_range(0.02..0.05);

    let mut img = MultimodalImage::filled(h, w, Modality::RgbIr, 0.0)?;
    for y in 0..h {
        let v = y as f64 / h as f64;
        for x in 0..w {
            let u = x as f64 / w as f64;
            let mut rgb = base;
            for (wave, amp) in waves.iter().zip(&amps) {
                let s = wave.at(v, u);
                for c in 0..3 {
                    rgb[c] += amp[c] * s;
                }
            }
            for (c, value) in rgb.iter_mut().enumerate() {
                *value += rng.gen_range(-0.01..0.01);
                img.set(y, x, c, *value);
            }
            let lum = luminance(img.get(y, x, 0), img.get(y, x, 1), img.get(y, x, 2));
            let ir = thermal(lum) + ir_amp * ir_wave.at(v, u) + rng.gen_range(-0.02..0.02);
            img.set(y, x, 3, ir);
        }
    }

    let n_objects = rng.gen_range(1..=8);
    let mut boxes = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let class = rng.gen_range(0..N_CLASSES);
        let bh = rng.gen_range(h / 8..=h / 3);
        let bw = rng.gen_range(w / 8..=w / 3);
        let by = rng.gen_range(0..=h - bh);
        let bx = rng.gen_range(0..=w - bw);
        let sig = RGB_SIGNATURES[class / 2];
        let color: [f64; 3] = std::array::from_fn(|c| sig[c] + rng.gen_range(-0.06..0.06));
        let offset = if class % 2 == 1 { HOT_OFFSET } else { COLD_OFFSET };
        for y in by..by + bh {
            for x in bx..bx + bw {
                for (c, &value) in color.iter().enumerate() {
                    img.set(y, x, c, value + rng.gen_range(-0.02..0.02));
                }
                let lum = luminance(img.get(y, x, 0), img.get(y, x, 1), img.get(y, x, 2));
                img.set(y, x, 3, thermal(lum) + offset + rng.gen_range(-0.02..0.02));
            }
        }
        boxes.push(BoxAnnotation {
            x: bx,
            y: by,
            w: bw,
            h: bh,
            class,
        });
    }
    Ok((img, Annotations { boxes }))
}
