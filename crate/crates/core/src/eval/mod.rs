//! Masked-region reconstruction quality, a frozen-encoder linear probe and
//! ablation sweeps.

mod probe;
mod report;
mod sweep;
mod visual;

pub use probe::{box_features, linear_probe, pool_box, probe_encoder, LabeledFeature, ProbeConfig, ProbeResult};
pub use report::{EvalReport, EvalRow};
pub use sweep::{ablation_sweep, AxisValue, SweepAxis, SweepOptions};
pub use visual::{save_side_by_side, side_by_side};

use crate::error::{Error, Result};
use crate::exec::{try_map_ordered, Execution};
use crate::imaging::dataset::Sample;
use crate::imaging::MultimodalImage;
use crate::masking::{detokenize, make_mask_plan, MaskPlan};
use crate::model::MimModel;
use crate::training::Corpus;

/// `10·log10(1/mse)` for pixels in `[0, 1]`; `+inf` for a perfect match.
pub fn psnr_db(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Squared error summed over pixels inside masked patches, and the number of
/// values summed.
pub fn masked_sse(x: &MultimodalImage, recon: &MultimodalImage, plan: &MaskPlan, patch: usize) -> Result<(f64, usize)> {
    if x.dims() != recon.dims() {
        let (a, b) = (x.dims(), recon.dims());
        return Err(Error::Dimension {
            op: "masked_sse",
            lhs: vec![a.0, a.1, a.2],
            rhs: vec![b.0, b.1, b.2],
        });
    }
    let (_, w, c) = x.dims();
    let grid_w = w / patch;
    let (mut sse, mut n) = (0.0, 0);
    for &t in plan.masked() {
        let (ty, tx) = (t / grid_w, t % grid_w);
        for y in ty * patch..(ty + 1) * patch {
            for xx in tx * patch..(tx + 1) * patch {
                for ch in 0..c {
                    let d = x.get(y, xx, ch) - recon.get(y, xx, ch);
                    sse += d * d;
                }
                n += c;
            }
        }
    }
    Ok((sse, n))
}

/// Plan seed for the `i`-th evaluation image; fixed given the eval seed.
pub fn eval_plan_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64).wrapping_add(0x51_7CC1_B727_220A)
}

/// Reconstruction of one image under `plan`, in pixel space.
pub fn reconstruct(model: &MimModel, corpus: &Corpus, img: &MultimodalImage, plan: &MaskPlan) -> Result<MultimodalImage> {
    let grid = corpus.grid(img)?;
    let mut pred = model.forward(&grid, plan)?.predicted;
    if let Some(stats) = corpus.stats() {
        let c = stats.mean.len();
        for (i, v) in pred.data_mut().iter_mut().enumerate() {
            *v = *v * stats.std[i % c] + stats.mean[i % c];
        }
    }
    detokenize(&grid.with_tokens(pred)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconstructionEval {
    pub mse: f64,
    pub psnr_db: f64,
    pub n_eval: usize,
}

/// Masked-region MSE over the first `n` samples, each under a fixed plan
/// derived from `seed`.
pub fn eval_reconstruction(
    model: &MimModel,
    corpus: &Corpus,
    samples: &[Sample],
    n: usize,
    ratio: f64,
    seed: u64,
    exec: Execution,
) -> Result<ReconstructionEval> {
    if n == 0 || samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let n = n.min(samples.len());
    let n_tokens = model.config().n_tokens();
    let patch = model.config().patch_size;
    let parts = try_map_ordered(exec, &samples[..n], |i, s| {
        let plan = make_mask_plan(n_tokens, ratio, eval_plan_seed(seed, i))?;
        let recon = reconstruct(model, corpus, &s.image, &plan)?;
        masked_sse(&s.image, &recon, &plan, patch)
    })?;
    let (sse, count) = parts.into_iter().fold((0.0, 0), |(a, b), (s, c)| (a + s, b + c));
    let mse = sse / count as f64;
    Ok(ReconstructionEval {
        mse,
        psnr_db: psnr_db(mse),
        n_eval: n,
    })
}
