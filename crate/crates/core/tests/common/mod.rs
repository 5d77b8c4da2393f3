//! Helpers and scalar oracles shared by the integration tests.
#![allow(dead_code)]

use imim_core::imaging::Modality;
use imim_core::masking::TokenGrid;
use imim_core::model::{MimConfig, MimModel, QueryMode};
use imim_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn small_config(d: usize, heads: usize, mode: QueryMode) -> MimConfig {
    MimConfig {
        embed_dim: d,
        n_heads: heads,
        image_height: 16,
        image_width: 16,
        query_mode: mode,
        ..MimConfig::tiny()
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Replaces every parameter with noise so no block sits at a degenerate init.
pub fn scramble(model: &mut MimModel, rng: &mut ChaCha8Rng, scale: f64) {
    for i in 0..model.n_param_tensors() {
        let t = model.param_mut(i);
        for v in t.data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

pub fn named<'a>(model: &'a MimModel, name: &str) -> &'a Tensor {
    model.param(model.param_index(name).unwrap()).1
}

pub fn random_grid(rng: &mut ChaCha8Rng, c: &MimConfig) -> TokenGrid {
    let t = Tensor::new(
        [c.n_tokens(), c.patch_dim()],
        (0..c.n_tokens() * c.patch_dim()).map(|_| rng.gen::<f64>()).collect(),
    )
    .unwrap();
    let modality = Modality::from_channels(c.channels).unwrap();
    TokenGrid::from_tensor(t, c.grid_h(), c.grid_w(), c.patch_size, modality).unwrap()
}

pub fn distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(rng);
    all.truncate(k);
    all
}

// Straight-line scalar reference for the cross-attention module.

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn affine(x: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|j| {
                    let mut s = b.data()[j];
                    for i in 0..din {
                        s += row[i] * w.data()[i * dout + j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn softmax_row(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn attention_scalar(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], c0: usize, dk: usize) -> Vec<Vec<f64>> {
    let scale = 1.0 / (dk as f64).sqrt();
    q.iter()
        .map(|qr| {
            let scores: Vec<f64> = k
                .iter()
                .map(|kr| (0..dk).map(|c| qr[c0 + c] * kr[c0 + c]).sum::<f64>() * scale)
                .collect();
            let a = softmax_row(&scores);
            (0..dk).map(|c| a.iter().zip(v).map(|(w, vr)| w * vr[c0 + c]).sum()).collect()
        })
        .collect()
}

pub fn cross_attention_oracle(model: &MimModel, masked: &[usize], enc: &Tensor) -> Vec<Vec<f64>> {
    let c = model.config();
    let (d, dk) = (c.embed_dim, c.head_dim());
    let me = named(model, "mask_embed").data();
    let pos = model.encoder().pos_embed();
    let qin: Vec<Vec<f64>> = masked.iter().map(|&p| (0..d).map(|j| me[j] + pos.row(p)[j]).collect()).collect();
    let feats = rows(enc);
    let p = |s: &str| named(model, &format!("cross_attn.{s}"));
    let (qsrc, kvsrc) = match c.query_mode {
        QueryMode::QMasked => (&qin, &feats),
        QueryMode::QUnmasked => (&feats, &qin),
        QueryMode::NullBaseline => unreachable!(),
    };
    let q = affine(qsrc, p("q.weight"), p("q.bias"));
    let k = affine(kvsrc, p("k.weight"), p("k.bias"));
    let v = affine(kvsrc, p("v.weight"), p("v.bias"));
    let mut concat = vec![vec![0.0; d]; masked.len()];
    for h in 0..c.n_heads {
        let c0 = h * dk;
        match c.query_mode {
            QueryMode::QMasked => {
                let out = attention_scalar(&q, &k, &v, c0, dk);
                for (r, row) in out.iter().enumerate() {
                    concat[r][c0..c0 + dk].copy_from_slice(row);
                }
            }
            _ => {
                // Unmasked rows attend over masked keys; masked outputs are
                // read back through the transposed attention map.
                let scale = 1.0 / (dk as f64).sqrt();
                let a: Vec<Vec<f64>> = q
                    .iter()
                    .map(|qr| {
                        let s: Vec<f64> = k.iter().map(|kr| (0..dk).map(|cc| qr[c0 + cc] * kr[c0 + cc]).sum::<f64>() * scale).collect();
                        softmax_row(&s)
                    })
                    .collect();
                let av: Vec<Vec<f64>> = a.iter().map(|ar| (0..dk).map(|cc| ar.iter().zip(&v).map(|(w, vr)| w * vr[c0 + cc]).sum()).collect()).collect();
                for r in 0..masked.len() {
                    for cc in 0..dk {
                        concat[r][c0 + cc] = (0..a.len()).map(|i| a[i][r] * av[i][cc]).sum();
                    }
                }
            }
        }
    }
    affine(&concat, p("o.weight"), p("o.bias"))
}

pub fn flat_loop_sse(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s
}
