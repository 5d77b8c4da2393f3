//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments plus the step count used for bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor> = shapes.into_iter().map(|s| Tensor::zeros(s.to_vec())).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One AdamW update. Nothing is modified if any gradient is non-finite.
pub fn adamw_step<'a>(
    params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    grads: &[Tensor],
    state: &mut AdamState,
    hp: &AdamW,
) -> Result<()> {
    let params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::contract(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (name, p)) in params.iter().enumerate() {
        let g = &grads[i];
        if p.shape() != g.shape() || state.m[i].shape() != g.shape() || state.v[i].shape() != g.shape() {
            return Err(Error::Dimension {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient((*name).to_string()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, (_, p)) in params.into_iter().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = hp.beta1 * *mj + (1.0 - hp.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = hp.beta2 * *vj + (1.0 - hp.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (j, pj) in p.data_mut().iter_mut().enumerate() {
            let decay = hp.lr * hp.weight_decay * *pj;
            let adaptive = hp.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + hp.eps);
            *pj = *pj - decay - adaptive;
        }
    }
    Ok(())
}
