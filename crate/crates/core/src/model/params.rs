use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Arc<Tensor>)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.push((name.into(), Arc::new(value)));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t.as_ref())
    }

    pub fn at(&self, index: usize) -> &Tensor {
        &self.entries[index].1
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t.as_ref()))
    }

    /// Mutable access; copies the buffer only if a tape still shares it.
    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[index].1)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), Arc::make_mut(t)))
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every parameter as a leaf on `tape`, in order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| tape.leaf_shared(Arc::clone(t), requires_grad))
            .collect()
    }

    /// Checks `other` has the same names and shapes, then takes its values.
    pub fn load_from(&mut self, lookup: impl Fn(&str) -> Option<Tensor>) -> Result<()> {
        for (name, slot) in &mut self.entries {
            let t = lookup(name).ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = Arc::new(t);
        }
        Ok(())
    }
}

/// Initialization rule for one parameter.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Uniform in `±1/√fan_in`.
    Uniform { fan_in: usize },
}

fn stream_id(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Each parameter draws from its own ChaCha stream keyed by name, so models
/// that differ only by extra parameters share identical values for the
/// common ones.
pub(crate) fn init_tensor(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape.to_vec()),
        Init::Ones => Tensor::full(shape.to_vec(), 1.0),
        Init::Uniform { fan_in } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_id(name));
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape and data agree")
        }
    }
}
