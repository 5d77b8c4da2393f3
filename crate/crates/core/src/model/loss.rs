//! Pixel-space reconstruction loss.
//!
//! For one image, the loss is `‖x − f(x)‖²` divided by the number of pixel
//! values in scope, so magnitudes are comparable across resolutions and mask
//! sizes. A batch loss is the mean of per-image losses.

use super::LossScope;
use crate::error::{Error, Result};
use crate::imaging::MultimodalImage;
use crate::masking::MaskPlan;

/// Masked patches of an image: the plan plus the patch geometry needed to
/// map tokens to pixels.
#[derive(Clone, Copy, Debug)]
pub struct PatchMask<'a> {
    pub plan: &'a MaskPlan,
    pub patch_size: usize,
}

impl PatchMask<'_> {
    pub fn contains(&self, y: usize, x: usize, image_width: usize) -> bool {
        let grid_w = image_width / self.patch_size;
        let token = (y / self.patch_size) * grid_w + x / self.patch_size;
        self.plan.masked().binary_search(&token).is_ok()
    }
}

pub fn reconstruction_loss(x: &MultimodalImage, fcx: &MultimodalImage, scope: LossScope, mask: Option<PatchMask<'_>>) -> Result<f64> {
    if x.dims() != fcx.dims() {
        let (a, b) = (x.dims(), fcx.dims());
        return Err(Error::Dimension {
            op: "reconstruction_loss",
            lhs: vec![a.0, a.1, a.2],
            rhs: vec![b.0, b.1, b.2],
        });
    }
    let (h, w, c) = x.dims();
    match scope {
        LossScope::FullImage => {
            let total: f64 = x.pixels().iter().zip(fcx.pixels()).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok(total / x.pixels().len() as f64)
        }
        LossScope::MaskedOnly => {
            let mask = mask.ok_or_else(|| Error::contract("masked_only loss needs a mask plan"))?;
            if mask.patch_size == 0 || h % mask.patch_size != 0 || w % mask.patch_size != 0 {
                return Err(Error::contract("patch size does not tile the image"));
            }
            let (mut total, mut count) = (0.0, 0usize);
            for y in 0..h {
                for xx in 0..w {
                    if !mask.contains(y, xx, w) {
                        continue;
                    }
                    for ch in 0..c {
                        let d = x.get(y, xx, ch) - fcx.get(y, xx, ch);
                        total += d * d;
                    }
                    count += c;
                }
            }
            if count == 0 {
                return Err(Error::contract("mask covers no pixels"));
            }
            Ok(total / count as f64)
        }
    }
}

/// Mean of [`reconstruction_loss`] over a batch.
pub fn batch_reconstruction_loss(items: &[(&MultimodalImage, &MultimodalImage)], scope: LossScope, masks: Option<&[PatchMask<'_>]>) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    if let Some(m) = masks {
        if m.len() != items.len() {
            return Err(Error::contract("one mask per batch element required"));
        }
    }
    let mut total = 0.0;
    for (i, (x, f)) in items.iter().enumerate() {
        total += reconstruction_loss(x, f, scope, masks.map(|m| m[i]))?;
    }
    Ok(total / items.len() as f64)
}
