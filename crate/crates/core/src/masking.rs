//! Patch tokenization and deterministic mask plans.
//!
//! A token is one `patch x patch` square flattened row-major, channel-last:
//! element `(py * patch + px) * channels + c`. Tokens are numbered in raster
//! order over the patch grid. One masked token hides exactly one patch, so
//! the mask size in pixels is the patch size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Modality, MultimodalImage};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    tokens: Tensor,
    grid_h: usize,
    grid_w: usize,
    patch_size: usize,
    modality: Modality,
}

impl TokenGrid {
    pub fn from_tensor(tokens: Tensor, grid_h: usize, grid_w: usize, patch_size: usize, modality: Modality) -> Result<Self> {
        let want = [grid_h * grid_w, patch_size * patch_size * modality.channels()];
        if tokens.shape() != want {
            return Err(Error::Dimension {
                op: "token grid",
                lhs: tokens.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        Ok(Self {
            tokens,
            grid_h,
            grid_w,
            patch_size,
            modality,
        })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn into_tokens(self) -> Tensor {
        self.tokens
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels()
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn channels(&self) -> usize {
        self.modality.channels()
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    /// Same geometry, different token values (e.g. a reconstruction).
    pub fn with_tokens(&self, tokens: Tensor) -> Result<TokenGrid> {
        Self::from_tensor(tokens, self.grid_h, self.grid_w, self.patch_size, self.modality)
    }
}

fn divisors_hint(h: usize, w: usize) -> String {
    let g = gcd(h, w);
    let sizes: Vec<String> = (1..=g).filter(|p| g.is_multiple_of(*p) && *p >= 2).map(|p| p.to_string()).collect();
    sizes.join(", ")
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn tokenize(img: &MultimodalImage, patch_size: usize) -> Result<TokenGrid> {
    let (h, w, c) = img.dims();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Tokenization(format!(
            "{h}x{w} image is not divisible by patch size {patch_size}; valid sizes: {}",
            divisors_hint(h, w)
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let pd = patch_size * patch_size * c;
    let px = img.pixels();
    let mut data = Vec::with_capacity(gh * gw * pd);
    for ty in 0..gh {
        for tx in 0..gw {
            for py in 0..patch_size {
                let start = ((ty * patch_size + py) * w + tx * patch_size) * c;
                data.extend_from_slice(&px[start..start + patch_size * c]);
            }
        }
    }
    TokenGrid::from_tensor(Tensor::new([gh * gw, pd], data)?, gh, gw, patch_size, img.modality())
}

/// Reassembles pixels from tokens. Values are clamped to `[0, 1]`, which is
/// a no-op for grids produced by [`tokenize`].
pub fn detokenize(grid: &TokenGrid) -> Result<MultimodalImage> {
    let (p, c) = (grid.patch_size, grid.channels());
    let (h, w) = (grid.grid_h * p, grid.grid_w * p);
    let mut px = vec![0.0; h * w * c];
    for (k, token) in grid.tokens.data().chunks_exact(grid.patch_dim()).enumerate() {
        let (ty, tx) = (k / grid.grid_w, k % grid.grid_w);
        for py in 0..p {
            let dst = ((ty * p + py) * w + tx * p) * c;
            px[dst..dst + p * c].copy_from_slice(&token[py * p * c..(py + 1) * p * c]);
        }
    }
    for v in &mut px {
        *v = v.clamp(0.0, 1.0);
    }
    MultimodalImage::new(h, w, grid.modality, px)
}

/// Partition of token indices into masked and unmasked sets.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    masked: Vec<usize>,
    unmasked: Vec<usize>,
    ratio: f64,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct MaskPlanRecord {
    seed: u64,
    ratio: f64,
    n_tokens: usize,
    masked_idx: Vec<usize>,
}

impl MaskPlan {
    /// Builds a plan from an explicit masked set. Both sides must be
    /// non-empty.
    pub fn from_masked(n_tokens: usize, masked: &[usize], ratio: f64, seed: u64) -> Result<Self> {
        let mut is_masked = vec![false; n_tokens];
        for &i in masked {
            if i >= n_tokens {
                return Err(Error::Plan(format!("masked index {i} out of range {n_tokens}")));
            }
            if std::mem::replace(&mut is_masked[i], true) {
                return Err(Error::Plan(format!("masked index {i} repeated")));
            }
        }
        let masked: Vec<usize> = (0..n_tokens).filter(|&i| is_masked[i]).collect();
        let unmasked: Vec<usize> = (0..n_tokens).filter(|&i| !is_masked[i]).collect();
        if masked.is_empty() || unmasked.is_empty() {
            return Err(Error::Plan(format!(
                "{} masked and {} unmasked tokens; both sets must be non-empty",
                masked.len(),
                unmasked.len()
            )));
        }
        Ok(Self {
            masked,
            unmasked,
            ratio,
            seed,
        })
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn unmasked(&self) -> &[usize] {
        &self.unmasked
    }

    pub fn n_tokens(&self) -> usize {
        self.masked.len() + self.unmasked.len()
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Per-token indicator, 1.0 where masked.
    pub fn mask_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.n_tokens()];
        for &i in &self.masked {
            w[i] = 1.0;
        }
        w
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&MaskPlanRecord {
            seed: self.seed,
            ratio: self.ratio,
            n_tokens: self.n_tokens(),
            masked_idx: self.masked.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: MaskPlanRecord = serde_json::from_str(s)?;
        Self::from_masked(r.n_tokens, &r.masked_idx, r.ratio, r.seed)
    }
}

pub fn masked_count(n_tokens: usize, ratio: f64) -> usize {
    (ratio * n_tokens as f64).round() as usize
}

/// Uniform random masked subset of size `round(ratio · n_tokens)`, drawn
/// with a seeded Fisher–Yates shuffle.
pub fn make_mask_plan(n_tokens: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Plan(format!("mask ratio {ratio} must lie strictly between 0 and 1")));
    }
    if n_tokens < 2 {
        return Err(Error::Plan(format!("need at least 2 tokens, got {n_tokens}")));
    }
    let n_masked = masked_count(n_tokens, ratio);
    if n_masked == 0 || n_masked == n_tokens {
        return Err(Error::Plan(format!(
            "ratio {ratio} over {n_tokens} tokens masks {n_masked}; both sets must be non-empty"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n_tokens).collect();
    for i in (1..n_tokens).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    MaskPlan::from_masked(n_tokens, &perm[..n_masked], ratio, seed)
}

/// The unmasked token rows in ascending index order, plus the masked
/// positions. Masked token content is never read.
pub fn split_tokens(grid: &TokenGrid, plan: &MaskPlan) -> Result<(Tensor, Vec<usize>)> {
    if plan.n_tokens() != grid.n_tokens() {
        return Err(Error::contract(format!(
            "mask plan covers {} tokens but grid has {}",
            plan.n_tokens(),
            grid.n_tokens()
        )));
    }
    Ok((grid.tokens.gather_rows(&plan.unmasked)?, plan.masked.clone()))
}
