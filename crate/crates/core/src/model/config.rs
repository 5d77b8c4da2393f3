use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where cross-attention queries come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Masked-position embeddings query the encoder features.
    QMasked,
    /// Encoder features query the masked-position embeddings; results reach
    /// masked positions through the transposed attention map.
    QUnmasked,
    /// No cross-attention: masked positions carry only their embeddings.
    NullBaseline,
}

impl QueryMode {
    pub const ALL: [QueryMode; 3] = [QueryMode::QMasked, QueryMode::QUnmasked, QueryMode::NullBaseline];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryMode::QMasked => "q_masked",
            QueryMode::QUnmasked => "q_unmasked",
            QueryMode::NullBaseline => "null_baseline",
        }
    }

    pub fn has_cross_attention(self) -> bool {
        self != QueryMode::NullBaseline
    }
}

impl std::str::FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QueryMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown query mode `{s}` (q_masked, q_unmasked, null_baseline)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    FullImage,
    MaskedOnly,
}

impl LossScope {
    pub fn as_str(self) -> &'static str {
        match self {
            LossScope::FullImage => "full_image",
            LossScope::MaskedOnly => "masked_only",
        }
    }
}

impl std::str::FromStr for LossScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_image" => Ok(LossScope::FullImage),
            "masked_only" => Ok(LossScope::MaskedOnly),
            other => Err(Error::Config(format!("unknown loss scope `{other}` (full_image, masked_only)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MimConfig {
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub query_mode: QueryMode,
    pub loss_scope: LossScope,
}

impl Default for MimConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            encoder_depth: 4,
            n_heads: 4,
            mlp_ratio: 4,
            patch_size: 32,
            channels: 4,
            image_height: 128,
            image_width: 128,
            query_mode: QueryMode::QMasked,
            loss_scope: LossScope::FullImage,
        }
    }
}

impl MimConfig {
    /// The smallest configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 8,
            encoder_depth: 1,
            n_heads: 2,
            mlp_ratio: 4,
            patch_size: 4,
            channels: 3,
            image_height: 8,
            image_width: 8,
            query_mode: QueryMode::QMasked,
            loss_scope: LossScope::FullImage,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.n_heads == 0 {
            return fail("embed_dim and n_heads must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return fail(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        if !(self.channels == 3 || self.channels == 4) {
            return fail(format!("channels must be 3 or 4, got {}", self.channels));
        }
        if self.patch_size == 0 || !self.image_height.is_multiple_of(self.patch_size) || !self.image_width.is_multiple_of(self.patch_size) {
            return fail(format!(
                "{}x{} image is not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        if self.n_tokens() < 2 {
            return fail("at least two tokens are needed for masking".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn grid_h(&self) -> usize {
        self.image_height / self.patch_size
    }

    pub fn grid_w(&self) -> usize {
        self.image_width / self.patch_size
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}
