//! Patch projection, frozen sinusoidal positions and a pre-norm transformer
//! stack run over the visible tokens only.

use std::sync::Arc;

use super::attention::{linear, multi_head};
use super::params::{init_tensor, Init, ParamSet};
use super::MimConfig;
use crate::error::{Error, Result};
use crate::masking::TokenGrid;
use crate::tensor::{Tape, Tensor, Var};

const PATCH_W: usize = 0;
const PATCH_B: usize = 1;
const FIRST_BLOCK: usize = 2;
const BLOCK_LEN: usize = 12;

/// 2-D sine/cosine table over the patch grid: the first half of the channels
/// encode the row, the second half the column. Falls back to a 1-D table over
/// the raster index when `d` is not a multiple of 4.
pub fn sincos_pos_embed(grid_h: usize, grid_w: usize, d: usize) -> Tensor {
    let n = grid_h * grid_w;
    let mut data = vec![0.0; n * d];
    let fill = |out: &mut [f64], pos: f64, width: usize| {
        let half = width / 2;
        for i in 0..half {
            let omega = 1.0 / 10000f64.powf(i as f64 / half.max(1) as f64);
            out[i] = (pos * omega).sin();
            out[half + i] = (pos * omega).cos();
        }
        if width % 2 == 1 {
            out[width - 1] = (pos).sin();
        }
    };
    for t in 0..n {
        let row = &mut data[t * d..(t + 1) * d];
        if d.is_multiple_of(4) {
            let (ry, rx) = row.split_at_mut(d / 2);
            fill(ry, (t / grid_w) as f64, d / 2);
            fill(rx, (t % grid_w) as f64, d / 2);
        } else {
            fill(row, t as f64, d);
        }
    }
    Tensor::new([n, d], data).expect("shape and data agree")
}

pub(crate) fn encoder_specs(c: &MimConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, pd, hd) = (c.embed_dim, c.patch_dim(), c.hidden_dim());
    let mut specs = vec![
        ("patch_proj.weight".to_string(), vec![pd, d], Init::Uniform { fan_in: pd }),
        ("patch_proj.bias".to_string(), vec![d], Init::Zeros),
    ];
    for b in 0..c.encoder_depth {
        let p = |s: &str| format!("encoder.blocks.{b}.{s}");
        specs.extend([
            (p("norm1.gamma"), vec![d], Init::Ones),
            (p("norm1.beta"), vec![d], Init::Zeros),
            (p("attn.qkv.weight"), vec![d, 3 * d], Init::Uniform { fan_in: d }),
            (p("attn.qkv.bias"), vec![3 * d], Init::Zeros),
            (p("attn.proj.weight"), vec![d, d], Init::Uniform { fan_in: d }),
            (p("attn.proj.bias"), vec![d], Init::Zeros),
            (p("norm2.gamma"), vec![d], Init::Ones),
            (p("norm2.beta"), vec![d], Init::Zeros),
            (p("mlp.fc1.weight"), vec![d, hd], Init::Uniform { fan_in: d }),
            (p("mlp.fc1.bias"), vec![hd], Init::Zeros),
            (p("mlp.fc2.weight"), vec![hd, d], Init::Uniform { fan_in: hd }),
            (p("mlp.fc2.bias"), vec![d], Init::Zeros),
        ]);
    }
    specs.extend([
        ("encoder.norm.gamma".to_string(), vec![d], Init::Ones),
        ("encoder.norm.beta".to_string(), vec![d], Init::Zeros),
    ]);
    specs
}

pub(crate) fn build_params(specs: Vec<(String, Vec<usize>, Init)>, seed: u64) -> ParamSet {
    let mut set = ParamSet::new();
    for (name, shape, init) in specs {
        let t = init_tensor(seed, &name, &shape, init);
        set.push(name, t);
    }
    set
}

/// The part of the model that survives pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: MimConfig,
    params: ParamSet,
    pos_embed: Arc<Tensor>,
}

impl Encoder {
    pub(crate) fn init(config: &MimConfig, seed: u64) -> Self {
        Self {
            config: config.clone(),
            params: build_params(encoder_specs(config), seed),
            pos_embed: Arc::new(sincos_pos_embed(config.grid_h(), config.grid_w(), config.embed_dim)),
        }
    }

    /// Rebuilds an encoder from stored tensors; names and shapes must match
    /// the layout `config` implies.
    pub fn from_tensors(config: &MimConfig, lookup: impl Fn(&str) -> Option<Tensor>) -> Result<Self> {
        config.validate()?;
        let mut enc = Self::init(config, 0);
        enc.params.load_from(&lookup)?;
        if let Some(pe) = lookup("pos_embed") {
            if pe.shape() != enc.pos_embed.shape() {
                return Err(Error::Format(format!("pos_embed has shape {:?}", pe.shape())));
            }
            enc.pos_embed = Arc::new(pe);
        } else {
            return Err(Error::Format("missing tensor `pos_embed`".into()));
        }
        Ok(enc)
    }

    pub fn config(&self) -> &MimConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn pos_embed(&self) -> &Tensor {
        &self.pos_embed
    }

    pub(crate) fn check_positions(&self, positions: &[usize]) -> Result<()> {
        let n = self.config.n_tokens();
        let mut seen = vec![false; n];
        for &p in positions {
            if p >= n {
                return Err(Error::contract(format!("position {p} out of range for {n} tokens")));
            }
            if std::mem::replace(&mut seen[p], true) {
                return Err(Error::contract(format!("position {p} repeated")));
            }
        }
        Ok(())
    }

    pub(crate) fn pos_rows(&self, tape: &mut Tape, positions: &[usize]) -> Result<Var> {
        let rows = self.pos_embed.gather_rows(positions)?;
        Ok(tape.constant(rows))
    }

    /// Encoder forward on a tape. `vars` are this encoder's parameters bound
    /// by [`ParamSet::bind`]; `tokens` holds one row per entry of `positions`.
    pub(crate) fn forward(&self, tape: &mut Tape, vars: &[Var], tokens: Var, positions: &[usize]) -> Result<Var> {
        let u = tape.value(tokens).rows();
        if u == 0 || positions.len() != u {
            return Err(Error::contract(format!("{u} tokens but {} positions", positions.len())));
        }
        if tape.value(tokens).cols() != self.config.patch_dim() {
            return Err(Error::Dimension {
                op: "encode",
                lhs: tape.shape(tokens).to_vec(),
                rhs: vec![u, self.config.patch_dim()],
            });
        }
        self.check_positions(positions)?;
        let d = self.config.embed_dim;
        let x = linear(tape, tokens, vars[PATCH_W], vars[PATCH_B])?;
        let pos = self.pos_rows(tape, positions)?;
        let mut h = tape.add(x, pos)?;
        for b in 0..self.config.encoder_depth {
            let p = &vars[FIRST_BLOCK + b * BLOCK_LEN..FIRST_BLOCK + (b + 1) * BLOCK_LEN];
            let a = tape.layernorm(h, p[0], p[1])?;
            let qkv = linear(tape, a, p[2], p[3])?;
            let q = tape.slice_cols(qkv, 0, d)?;
            let k = tape.slice_cols(qkv, d, d)?;
            let v = tape.slice_cols(qkv, 2 * d, d)?;
            let att = multi_head(tape, q, k, v, self.config.n_heads)?;
            let o = linear(tape, att.output, p[4], p[5])?;
            h = tape.add(h, o)?;
            let a = tape.layernorm(h, p[6], p[7])?;
            let f = linear(tape, a, p[8], p[9])?;
            let f = tape.gelu(f);
            let f = linear(tape, f, p[10], p[11])?;
            h = tape.add(h, f)?;
        }
        let n = vars.len();
        tape.layernorm(h, vars[n - 2], vars[n - 1])
    }

    /// Features `[u, d]` for visible tokens at the given grid positions.
    pub fn encode(&self, tokens: &Tensor, positions: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.constant(tokens.clone());
        let out = self.forward(&mut tape, &vars, x, positions)?;
        Ok(tape.value(out).clone())
    }

    /// Features for every token of an unmasked grid.
    pub fn encode_grid(&self, grid: &TokenGrid) -> Result<Tensor> {
        let positions: Vec<usize> = (0..grid.n_tokens()).collect();
        self.encode(grid.tokens(), &positions)
    }
}
