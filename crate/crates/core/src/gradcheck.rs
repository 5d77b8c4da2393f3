//! Central finite-difference gradient checking.
//!
//! The finite-difference side only ever evaluates forward passes, so it is an
//! independent check on the tape's backward rules.

use crate::error::Result;
use crate::masking::{MaskPlan, TokenGrid};
use crate::model::MimModel;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;

/// `|analytic − fd| ≤ max(rel·|fd|, abs)`.
pub fn within_tolerance(analytic: f64, fd: f64) -> bool {
    (analytic - fd).abs() <= (REL_TOL * fd.abs()).max(ABS_TOL)
}

/// Error normalized so that values `≤ REL_TOL` pass exactly when
/// [`within_tolerance`] holds.
pub fn normalized_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(ABS_TOL / REL_TOL)
}

/// Central differences of a scalar function at `x`.
pub fn finite_difference(x: &Tensor, eps: f64, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub failures: usize,
    pub max_error: f64,
}

#[derive(Clone, Debug)]
pub struct GroupCheck {
    pub group: String,
    pub numel: usize,
    pub failures: usize,
    pub max_error: f64,
}

impl GroupCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Parameter group of a tensor name: the block for encoder blocks, the first
/// component otherwise.
pub fn group_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["encoder", "blocks", i, ..] => format!("encoder.blocks.{i}"),
        ["encoder", "norm", ..] => "encoder.norm".into(),
        [first, ..] => (*first).to_string(),
        [] => String::new(),
    }
}

/// Compares backprop gradients of the model loss against central finite
/// differences for every scalar of every parameter tensor.
pub fn check_model(model: &MimModel, grid: &TokenGrid, plan: &MaskPlan, eps: f64) -> Result<Vec<TensorCheck>> {
    let (_, grads) = model.loss_and_grads(grid, plan)?;
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(grads.len());
    for (i, analytic) in grads.iter().enumerate() {
        let name = model.param(i).0.to_string();
        let (mut failures, mut max_error) = (0, 0.0f64);
        for j in 0..analytic.len() {
            let orig = probe.param(i).1.data()[j];
            probe.param_mut(i).data_mut()[j] = orig + eps;
            let up = probe.forward(grid, plan)?.loss;
            probe.param_mut(i).data_mut()[j] = orig - eps;
            let down = probe.forward(grid, plan)?.loss;
            probe.param_mut(i).data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = analytic.data()[j];
            if !within_tolerance(a, fd) {
                failures += 1;
            }
            max_error = max_error.max(normalized_error(a, fd));
        }
        out.push(TensorCheck {
            name,
            numel: analytic.len(),
            failures,
            max_error,
        });
    }
    Ok(out)
}

/// Folds per-tensor results into parameter groups, in first-seen order.
pub fn by_group(checks: &[TensorCheck]) -> Vec<GroupCheck> {
    let mut groups: Vec<GroupCheck> = Vec::new();
    for c in checks {
        let g = group_of(&c.name);
        match groups.iter_mut().find(|x| x.group == g) {
            Some(x) => {
                x.numel += c.numel;
                x.failures += c.failures;
                x.max_error = x.max_error.max(c.max_error);
            }
            None => groups.push(GroupCheck {
                group: g,
                numel: c.numel,
                failures: c.failures,
                max_error: c.max_error,
            }),
        }
    }
    groups
}
