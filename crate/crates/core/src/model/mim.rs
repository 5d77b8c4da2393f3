use std::sync::Arc;

use super::attention::{linear, multi_head, multi_head_transposed};
use super::encoder::{build_params, Encoder};
use super::params::{Init, ParamSet};
use super::{LossScope, MimConfig, QueryMode};
use crate::error::{Error, Result};
use crate::imaging::MultimodalImage;
use crate::masking::{detokenize, MaskPlan, TokenGrid};
use crate::tensor::{Tape, Tensor, Var};

const MASK_EMBED: usize = 0;
const CROSS_FIRST: usize = 1;

pub(crate) fn head_specs(c: &MimConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, pd) = (c.embed_dim, c.patch_dim());
    let mut specs = vec![("mask_embed".to_string(), vec![d], Init::Uniform { fan_in: d })];
    if c.query_mode.has_cross_attention() {
        for p in ["q", "k", "v"] {
            specs.push((format!("cross_attn.{p}.weight"), vec![d, d], Init::Uniform { fan_in: d }));
            specs.push((format!("cross_attn.{p}.bias"), vec![d], Init::Zeros));
        }
        // Zero output projection: the interactive model starts exactly at the
        // null-token baseline.
        specs.push(("cross_attn.o.weight".to_string(), vec![d, d], Init::Zeros));
        specs.push(("cross_attn.o.bias".to_string(), vec![d], Init::Zeros));
    }
    specs.push(("decoder.weight".to_string(), vec![d, pd], Init::Uniform { fan_in: d }));
    specs.push(("decoder.bias".to_string(), vec![pd], Init::Zeros));
    specs
}

/// Result of a full reconstruction pass.
#[derive(Clone, Debug)]
pub struct ReconstructionOutput {
    /// Detokenized prediction, clamped to the valid pixel range.
    pub reconstruction: MultimodalImage,
    /// Raw decoder output, one row per token.
    pub predicted: Tensor,
    /// Merged per-token features fed to the decoder, `[n_tokens, d]`.
    pub features: Tensor,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct CrossAttentionOutput {
    /// Contextual features for the masked positions, after the output
    /// projection, `[m, d]`.
    pub output: Tensor,
    /// Per-head attention weights.
    pub weights: Vec<Tensor>,
}

/// Tape handles for every intermediate of one forward pass.
pub struct ForwardTrace {
    pub params: Vec<Var>,
    pub input: Var,
    pub encoded: Var,
    pub queries: Var,
    pub cross: Option<Var>,
    pub attention: Vec<Var>,
    pub masked_features: Var,
    pub merged: Var,
    pub predicted: Var,
    pub loss: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct TraceOptions {
    pub params_require_grad: bool,
    pub input_requires_grad: bool,
    /// Overrides the configured query mode, e.g. to run the null-token path on
    /// an interactive model.
    pub mode: Option<QueryMode>,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            params_require_grad: true,
            input_requires_grad: false,
            mode: None,
        }
    }
}

/// Encoder, cross-attention module and per-token linear decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct MimModel {
    encoder: Encoder,
    heads: ParamSet,
}

impl MimModel {
    pub fn new(config: &MimConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoder: Encoder::init(config, seed),
            heads: build_params(head_specs(config), seed),
        })
    }

    pub fn from_tensors(config: &MimConfig, lookup: impl Fn(&str) -> Option<Tensor>) -> Result<Self> {
        let encoder = Encoder::from_tensors(config, &lookup)?;
        let mut heads = build_params(head_specs(config), 0);
        heads.load_from(&lookup)?;
        Ok(Self { encoder, heads })
    }

    pub fn config(&self) -> &MimConfig {
        self.encoder.config()
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn into_encoder(self) -> Encoder {
        self.encoder
    }

    pub fn heads(&self) -> &ParamSet {
        &self.heads
    }

    /// Number of trainable parameter tensors (encoder first, then heads).
    pub fn n_param_tensors(&self) -> usize {
        self.encoder.params().len() + self.heads.len()
    }

    pub fn param_count(&self) -> usize {
        self.encoder.params().numel() + self.heads.numel()
    }

    pub fn param(&self, i: usize) -> (&str, &Tensor) {
        let ne = self.encoder.params().len();
        if i < ne {
            (self.encoder.params().name(i), self.encoder.params().at(i))
        } else {
            (self.heads.name(i - ne), self.heads.at(i - ne))
        }
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        (0..self.n_param_tensors()).find(|&i| self.param(i).0 == name)
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Tensor {
        let ne = self.encoder.params().len();
        if i < ne {
            self.encoder.params_mut().tensor_mut(i)
        } else {
            self.heads.tensor_mut(i - ne)
        }
    }

    pub fn parameters(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.encoder.params().iter().chain(self.heads.iter())
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.encoder.params_mut().iter_mut().chain(self.heads.iter_mut())
    }

    /// Every stored tensor: trainable parameters plus the frozen positional
    /// table.
    pub fn named_tensors(&self) -> Vec<(&str, &Tensor)> {
        let mut out: Vec<(&str, &Tensor)> = self.encoder.params().iter().collect();
        out.push(("pos_embed", self.encoder.pos_embed()));
        out.extend(self.heads.iter());
        out
    }

    fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        let mut vars = self.encoder.params().bind(tape, requires_grad);
        vars.extend(self.heads.bind(tape, requires_grad));
        vars
    }

    fn head_var(&self, vars: &[Var], i: usize) -> Var {
        vars[self.encoder.params().len() + i]
    }

    fn decoder_vars(&self, vars: &[Var]) -> (Var, Var) {
        let n = vars.len();
        (vars[n - 2], vars[n - 1])
    }

    /// Masked-position queries: learned mask embedding plus the frozen
    /// positional row of each masked position.
    fn mask_queries(&self, tape: &mut Tape, vars: &[Var], masked: &[usize]) -> Result<Var> {
        let pos = self.encoder.pos_rows(tape, masked)?;
        tape.add_bias(pos, self.head_var(vars, MASK_EMBED))
    }

    fn cross_attend(&self, tape: &mut Tape, vars: &[Var], mode: QueryMode, queries: Var, enc: Var) -> Result<(Var, Vec<Var>)> {
        if !self.config().query_mode.has_cross_attention() {
            return Err(Error::contract("model was built without cross-attention weights"));
        }
        let w = |i: usize| self.head_var(vars, CROSS_FIRST + i);
        let heads = self.config().n_heads;
        let att = match mode {
            QueryMode::QMasked => {
                let q = linear(tape, queries, w(0), w(1))?;
                let k = linear(tape, enc, w(2), w(3))?;
                let v = linear(tape, enc, w(4), w(5))?;
                multi_head(tape, q, k, v, heads)?
            }
            QueryMode::QUnmasked => {
                let q = linear(tape, enc, w(0), w(1))?;
                let k = linear(tape, queries, w(2), w(3))?;
                let v = linear(tape, queries, w(4), w(5))?;
                multi_head_transposed(tape, q, k, v, heads)?
            }
            QueryMode::NullBaseline => unreachable!("null baseline has no cross-attention"),
        };
        let out = linear(tape, att.output, w(6), w(7))?;
        Ok((out, att.weights))
    }

    /// Full forward pass recorded on `tape`.
    pub fn trace(&self, tape: &mut Tape, grid: &TokenGrid, plan: &MaskPlan, opts: TraceOptions) -> Result<ForwardTrace> {
        let c = self.config();
        if grid.n_tokens() != c.n_tokens() || grid.patch_dim() != c.patch_dim() {
            return Err(Error::contract(format!(
                "grid of {} tokens x {} does not fit model ({} x {})",
                grid.n_tokens(),
                grid.patch_dim(),
                c.n_tokens(),
                c.patch_dim()
            )));
        }
        if plan.n_tokens() != grid.n_tokens() {
            return Err(Error::contract(format!(
                "mask plan covers {} tokens, grid has {}",
                plan.n_tokens(),
                grid.n_tokens()
            )));
        }
        let mode = opts.mode.unwrap_or(c.query_mode);
        let params = self.bind(tape, opts.params_require_grad);
        let ne = self.encoder.params().len();

        let (visible, masked) = crate::masking::split_tokens(grid, plan)?;
        let input = tape.leaf(visible, opts.input_requires_grad);
        let encoded = self.encoder.forward(tape, &params[..ne], input, plan.unmasked())?;

        let queries = self.mask_queries(tape, &params, &masked)?;
        let (cross, attention, masked_features) = if mode.has_cross_attention() {
            let (out, weights) = self.cross_attend(tape, &params, mode, queries, encoded)?;
            let feats = tape.add(queries, out)?;
            (Some(out), weights, feats)
        } else {
            (None, Vec::new(), queries)
        };

        let merged = tape.scatter_rows(c.n_tokens(), &[(encoded, plan.unmasked()), (masked_features, &masked)])?;
        let (dw, db) = self.decoder_vars(&params);
        let predicted = linear(tape, merged, dw, db)?;
        let target = Arc::new(grid.tokens().clone());
        let loss = token_loss(tape, predicted, target, plan, c.loss_scope)?;
        Ok(ForwardTrace {
            params,
            input,
            encoded,
            queries,
            cross,
            attention,
            masked_features,
            merged,
            predicted,
            loss,
        })
    }

    /// Cross-attention output for `masked` positions against encoder
    /// features, in the configured query mode.
    pub fn cross_attention(&self, masked: &[usize], enc_feats: &Tensor) -> Result<CrossAttentionOutput> {
        if masked.is_empty() || enc_feats.rows() == 0 {
            return Err(Error::contract("cross-attention needs at least one query and one key"));
        }
        if enc_feats.shape().len() != 2 || enc_feats.cols() != self.config().embed_dim {
            return Err(Error::Dimension {
                op: "cross_attention",
                lhs: enc_feats.shape().to_vec(),
                rhs: vec![enc_feats.rows(), self.config().embed_dim],
            });
        }
        self.encoder.check_positions(masked)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let enc = tape.constant(enc_feats.clone());
        let queries = self.mask_queries(&mut tape, &vars, masked)?;
        let (out, weights) = self.cross_attend(&mut tape, &vars, self.config().query_mode, queries, enc)?;
        Ok(CrossAttentionOutput {
            output: tape.value(out).clone(),
            weights: weights.into_iter().map(|w| tape.value(w).clone()).collect(),
        })
    }

    /// Masked-position features as fed to the decoder: the query embedding
    /// plus, when the mode has one, the cross-attention output.
    pub fn masked_features(&self, masked: &[usize], enc_feats: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        self.encoder.check_positions(masked)?;
        let queries = self.mask_queries(&mut tape, &vars, masked)?;
        if !self.config().query_mode.has_cross_attention() {
            return Ok(tape.value(queries).clone());
        }
        let out = self.cross_attention(masked, enc_feats)?.output;
        let out = tape.constant(out);
        let feats = tape.add(queries, out)?;
        Ok(tape.value(feats).clone())
    }

    /// Scatters both feature sets to their grid positions, decodes every
    /// token and scores the result against `target`.
    pub fn merge_and_decode(&self, enc_feats: &Tensor, masked_feats: &Tensor, plan: &MaskPlan, target: &TokenGrid) -> Result<ReconstructionOutput> {
        let n = self.config().n_tokens();
        if plan.n_tokens() != n || target.n_tokens() != n {
            return Err(Error::contract(format!("merge expects {n} tokens")));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let enc = tape.constant(enc_feats.clone());
        let msk = tape.constant(masked_feats.clone());
        let merged = tape.scatter_rows(n, &[(enc, plan.unmasked()), (msk, plan.masked())])?;
        let (dw, db) = self.decoder_vars(&vars);
        let predicted = linear(&mut tape, merged, dw, db)?;
        let loss = token_loss(&mut tape, predicted, Arc::new(target.tokens().clone()), plan, self.config().loss_scope)?;
        self.package(&tape, target, merged, predicted, loss)
    }

    fn package(&self, tape: &Tape, target: &TokenGrid, merged: Var, predicted: Var, loss: Var) -> Result<ReconstructionOutput> {
        let predicted = tape.value(predicted).clone();
        let reconstruction = detokenize(&target.with_tokens(predicted.clone())?)?;
        Ok(ReconstructionOutput {
            reconstruction,
            predicted,
            features: tape.value(merged).clone(),
            loss: tape.value(loss).item()?,
        })
    }

    /// Reconstruction in the configured query mode.
    pub fn forward(&self, grid: &TokenGrid, plan: &MaskPlan) -> Result<ReconstructionOutput> {
        self.forward_with(grid, plan, self.config().query_mode)
    }

    /// Null-token reconstruction: masked positions get only their embedding,
    /// whatever weights the model carries.
    pub fn baseline_forward(&self, grid: &TokenGrid, plan: &MaskPlan) -> Result<ReconstructionOutput> {
        self.forward_with(grid, plan, QueryMode::NullBaseline)
    }

    fn forward_with(&self, grid: &TokenGrid, plan: &MaskPlan, mode: QueryMode) -> Result<ReconstructionOutput> {
        let mut tape = Tape::new();
        let t = self.trace(
            &mut tape,
            grid,
            plan,
            TraceOptions {
                params_require_grad: false,
                input_requires_grad: false,
                mode: Some(mode),
            },
        )?;
        self.package(&tape, grid, t.merged, t.predicted, t.loss)
    }

    /// Loss and its gradient for every parameter tensor, in
    /// [`MimModel::param`] order.
    pub fn loss_and_grads(&self, grid: &TokenGrid, plan: &MaskPlan) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let t = self.trace(&mut tape, grid, plan, TraceOptions::default())?;
        let loss = tape.value(t.loss).item()?;
        tape.backward(t.loss)?;
        let grads = t
            .params
            .iter()
            .map(|&v| {
                let shape = tape.shape(v).to_vec();
                tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(shape))
            })
            .collect();
        Ok((loss, grads))
    }
}

/// Per-pixel mean squared error in token space, over all tokens or the
/// masked ones only.
fn token_loss(tape: &mut Tape, predicted: Var, target: Arc<Tensor>, plan: &MaskPlan, scope: LossScope) -> Result<Var> {
    let pd = target.cols();
    match scope {
        LossScope::FullImage => {
            let norm = (target.rows() * pd) as f64;
            tape.sq_err(predicted, target, None, norm)
        }
        LossScope::MaskedOnly => {
            let norm = (plan.masked().len() * pd) as f64;
            tape.sq_err(predicted, target, Some(plan.mask_weights()), norm)
        }
    }
}
