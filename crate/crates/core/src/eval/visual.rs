//! Side-by-side reconstruction panels: original | masked | reconstruction.
//! An IR channel, when present, gets its own grey row underneath.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::{io, Modality, MultimodalImage};
use crate::masking::MaskPlan;

const MASK_FILL: f64 = 0.5;

pub fn side_by_side(original: &MultimodalImage, recon: &MultimodalImage, plan: &MaskPlan, patch: usize) -> Result<MultimodalImage> {
    if original.dims() != recon.dims() {
        let (a, b) = (original.dims(), recon.dims());
        return Err(Error::Dimension {
            op: "side_by_side",
            lhs: vec![a.0, a.1, a.2],
            rhs: vec![b.0, b.1, b.2],
        });
    }
    let (h, w, _) = original.dims();
    let grid_w = w / patch;
    if grid_w == 0 || plan.n_tokens() != (h / patch) * grid_w {
        return Err(Error::Plan(format!("plan over {} tokens does not fit a {h}x{w} image at patch {patch}", plan.n_tokens())));
    }
    let mut hidden = vec![false; plan.n_tokens()];
    for &t in plan.masked() {
        hidden[t] = true;
    }
    let rows = if original.modality() == Modality::RgbIr { 2 } else { 1 };
    let mut out = MultimodalImage::filled(h * rows, w * 3, Modality::Rgb, 0.0)?;
    for y in 0..h {
        for x in 0..w {
            let masked = hidden[(y / patch) * grid_w + x / patch];
            for row in 0..rows {
                for k in 0..3 {
                    let ch = if row == 0 { k } else { 3 };
                    let oy = row * h + y;
                    let orig = original.get(y, x, ch);
                    out.set(oy, x, k, orig);
                    out.set(oy, w + x, k, if masked { MASK_FILL } else { orig });
                    out.set(oy, 2 * w + x, k, recon.get(y, x, ch).clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(out)
}

pub fn save_side_by_side(path: &Path, original: &MultimodalImage, recon: &MultimodalImage, plan: &MaskPlan, patch: usize) -> Result<()> {
    io::save_png(&side_by_side(original, recon, plan, patch)?, path)
}
