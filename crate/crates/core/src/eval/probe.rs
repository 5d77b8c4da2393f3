//! Frozen-encoder linear probe on annotated boxes.
//!
//! Each box's feature is the overlap-weighted mean of the encoder features of
//! the patches it touches. A softmax-regression classifier is fit on the
//! training split by full-batch gradient descent from zero weights, so the
//! result is deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{try_map_ordered, Execution};
use crate::imaging::dataset::Sample;
use crate::imaging::synth::BoxAnnotation;
use crate::model::Encoder;
use crate::tensor::Tensor;
use crate::training::Corpus;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeature {
    pub feature: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
    /// Only one class was present, so accuracy is trivially 1.
    pub degenerate: bool,
}

/// Overlap-weighted mean of per-patch features over a box.
pub fn pool_box(features: &Tensor, grid_w: usize, patch: usize, b: &BoxAnnotation) -> Vec<f64> {
    let d = features.cols();
    let mut out = vec![0.0; d];
    let mut total = 0.0;
    let (ty0, ty1) = (b.y / patch, (b.y + b.h - 1) / patch);
    let (tx0, tx1) = (b.x / patch, (b.x + b.w - 1) / patch);
    for ty in ty0..=ty1 {
        let oy = (b.y + b.h).min((ty + 1) * patch) - b.y.max(ty * patch);
        for tx in tx0..=tx1 {
            let ox = (b.x + b.w).min((tx + 1) * patch) - b.x.max(tx * patch);
            let wgt = (oy * ox) as f64;
            for (o, f) in out.iter_mut().zip(features.row(ty * grid_w + tx)) {
                *o += wgt * f;
            }
            total += wgt;
        }
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Pooled encoder features for every annotated box, in sample order.
pub fn box_features(encoder: &Encoder, corpus: &Corpus, samples: &[Sample], exec: Execution) -> Result<Vec<LabeledFeature>> {
    let c = encoder.config();
    let per_sample = try_map_ordered(exec, samples, |_, s| -> Result<Vec<LabeledFeature>> {
        let ann = s
            .annotations
            .as_ref()
            .ok_or_else(|| Error::Data(format!("sample `{}` has no annotations", s.id)))?;
        let feats = encoder.encode_grid(&corpus.grid(&s.image)?)?;
        Ok(ann
            .boxes
            .iter()
            .filter(|b| b.w > 0 && b.h > 0)
            .map(|b| LabeledFeature {
                feature: pool_box(&feats, c.grid_w(), c.patch_size, b),
                label: b.class,
            })
            .collect())
    })?;
    Ok(per_sample.into_iter().flatten().collect())
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

/// Fits a linear classifier on `train` and reports accuracy on `test`.
pub fn linear_probe(train: &[LabeledFeature], test: &[LabeledFeature], cfg: &ProbeConfig) -> Result<ProbeResult> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data("probe needs labeled training and test boxes".into()));
    }
    let d = train[0].feature.len();
    let n_classes = train.iter().chain(test).map(|s| s.label).max().unwrap_or(0) + 1;
    let mut counts = vec![0usize; n_classes];
    for s in train {
        counts[s.label] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Stratification(format!(
            "class {missing} has no training samples ({} classes, {} training boxes)",
            n_classes,
            train.len()
        )));
    }
    if n_classes == 1 {
        log::warn!("linear probe: only one class present, accuracy is trivially 1");
        return Ok(ProbeResult {
            accuracy: 1.0,
            n_train: train.len(),
            n_test: test.len(),
            n_classes,
            degenerate: true,
        });
    }

    // Standardize with training statistics.
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for s in train {
        for (m, v) in mean.iter_mut().zip(&s.feature) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; d];
    for s in train {
        for k in 0..d {
            sd[k] += (s.feature[k] - mean[k]).powi(2) / n;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| v.sqrt().max(1e-8)).collect();
    let norm = |f: &[f64]| -> Vec<f64> { (0..d).map(|k| (f[k] - mean[k]) / sd[k]).collect() };
    let xs: Vec<Vec<f64>> = train.iter().map(|s| norm(&s.feature)).collect();

    let mut w = vec![0.0; d * n_classes];
    let mut b = vec![0.0; n_classes];
    let mut z = vec![0.0; n_classes];
    for _ in 0..cfg.epochs {
        let mut gw = vec![0.0; d * n_classes];
        let mut gb = vec![0.0; n_classes];
        for (x, s) in xs.iter().zip(train) {
            for c in 0..n_classes {
                z[c] = b[c] + (0..d).map(|k| x[k] * w[k * n_classes + c]).sum::<f64>();
            }
            softmax_in_place(&mut z);
            z[s.label] -= 1.0;
            for c in 0..n_classes {
                gb[c] += z[c] / n;
                for k in 0..d {
                    gw[k * n_classes + c] += x[k] * z[c] / n;
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= cfg.lr * (gi + cfg.l2 * *wi);
        }
        for (bi, gi) in b.iter_mut().zip(&gb) {
            *bi -= cfg.lr * gi;
        }
    }

    let correct = test
        .iter()
        .filter(|s| {
            let x = norm(&s.feature);
            let scores: Vec<f64> = (0..n_classes)
                .map(|c| b[c] + (0..d).map(|k| x[k] * w[k * n_classes + c]).sum::<f64>())
                .collect();
            let pred = (0..n_classes).fold(0, |best, c| if scores[c] > scores[best] { c } else { best });
            pred == s.label
        })
        .count();
    Ok(ProbeResult {
        accuracy: correct as f64 / test.len() as f64,
        n_train: train.len(),
        n_test: test.len(),
        n_classes,
        degenerate: false,
    })
}

/// Probe accuracy of a frozen encoder: fit on the training split, score on
/// the test split.
pub fn probe_encoder(encoder: &Encoder, corpus: &Corpus, cfg: &ProbeConfig, exec: Execution) -> Result<ProbeResult> {
    let ds = corpus.dataset();
    let train = box_features(encoder, corpus, &ds.train, exec)?;
    let test = box_features(encoder, corpus, &ds.test, exec)?;
    linear_probe(&train, &test, cfg)
}
