//! Multi-head scaled dot-product attention on a [`Tape`].

use crate::error::Result;
use crate::tensor::{Tape, Var};

/// `x · W + b` for a rank-2 `x`.
pub(crate) fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

pub(crate) struct Attended {
    /// Head outputs concatenated along columns, before any output projection.
    pub output: Var,
    /// Per-head attention weights, `[rows(q), rows(k)]`, each row summing to 1.
    pub weights: Vec<Var>,
}

/// `softmax(Q_h K_hᵀ / √d_k) V_h` for every head `h`, where head `h` owns
/// columns `h·d_k .. (h+1)·d_k` of the projected inputs.
pub(crate) fn multi_head(tape: &mut Tape, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Attended> {
    let d = tape.value(q).cols();
    let dk = d / n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let a = tape.softmax(scores, 1)?;
        heads.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    let output = if n_heads == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    Ok(Attended { output, weights })
}

/// Transposed-readout attention: queries distribute attention over keys as
/// usual, then each key position collects `Aᵀ (A V)`. Output rows follow the
/// key rows.
pub(crate) fn multi_head_transposed(tape: &mut Tape, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Attended> {
    let d = tape.value(q).cols();
    let dk = d / n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let a = tape.softmax(scores, 1)?;
        let per_query = tape.matmul(a, vh)?;
        let at = tape.transpose(a)?;
        heads.push(tape.matmul(at, per_query)?);
        weights.push(a);
    }
    let output = if n_heads == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    Ok(Attended { output, weights })
}
