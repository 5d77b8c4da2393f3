//! IMIM checkpoint container.
//!
//! Layout: `"IMIM" | u32 version | u64 header_len | header JSON | payload`.
//! The header carries the model config, a table of `(name, offset, len)`
//! entries into the payload, and free-form metadata. The payload is the
//! concatenation of the tensors in IMTN encoding.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{encoder_tensor_names, is_encoder_tensor, Encoder, MimConfig, MimModel};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"IMIM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Model,
    Encoder,
    TrainState,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    config: MimConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: MimConfig,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    /// Bytes taken by the tensor payload section.
    pub fn payload_len(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.encoded_len()).sum()
    }

    fn header_json(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let len = t.encoded_len() as u64;
            entries.push(TensorEntry {
                name: name.clone(),
                offset,
                len,
            });
            offset += len;
        }
        let header = Header {
            kind: self.kind,
            config: self.config.clone(),
            tensors: entries,
            meta: self.meta.clone(),
        };
        Ok(serde_json::to_vec(&header)?)
    }

    /// Size of the JSON header in bytes.
    pub fn header_len(&self) -> Result<usize> {
        Ok(self.header_json()?.len())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = self.header_json()?;
        let mut out = Vec::with_capacity(16 + header.len() + self.payload_len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            t.write_to(&mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 16 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing IMIM magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let payload = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected = 0u64;
        for e in header.tensors {
            if e.offset != expected {
                return Err(bad(&format!("tensor `{}` is not contiguous", e.name)));
            }
            let end = e.offset.checked_add(e.len).filter(|&x| x as usize <= payload.len());
            let end = end.ok_or_else(|| bad(&format!("tensor `{}` runs past the payload", e.name)))?;
            let mut slice = &payload[e.offset as usize..end as usize];
            let t = Tensor::read_from(&mut slice)?;
            if !slice.is_empty() {
                return Err(bad(&format!("tensor `{}` length mismatch", e.name)));
            }
            expected = end;
            tensors.push((e.name, t));
        }
        if expected as usize != payload.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes through a sibling temporary file so an interrupted save never
    /// clobbers an existing checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("imim.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn lookup(&self) -> impl Fn(&str) -> Option<Tensor> + '_ {
        move |n| self.get(n).cloned()
    }
}

pub fn model_checkpoint(model: &MimModel) -> Checkpoint {
    Checkpoint {
        kind: CheckpointKind::Model,
        config: model.config().clone(),
        meta: serde_json::Value::Null,
        tensors: model.named_tensors().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
    }
}

/// Rebuilds the full model from a model or training-state checkpoint.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<MimModel> {
    if ck.kind == CheckpointKind::Encoder {
        return Err(Error::Format("encoder-only checkpoint cannot rebuild the full model".into()));
    }
    MimModel::from_tensors(&ck.config, ck.lookup())
}

/// Keeps only the encoder tensors: patch projection, positional table and
/// encoder blocks.
pub fn export_encoder(ck: &Checkpoint) -> Result<Checkpoint> {
    if ck.kind == CheckpointKind::Encoder {
        return Ok(ck.clone());
    }
    for name in encoder_tensor_names(&ck.config) {
        if ck.get(&name).is_none() {
            return Err(Error::Export(format!("checkpoint lacks encoder tensor `{name}`")));
        }
    }
    Ok(Checkpoint {
        kind: CheckpointKind::Encoder,
        config: ck.config.clone(),
        meta: serde_json::Value::Null,
        tensors: ck.tensors.iter().filter(|(n, _)| is_encoder_tensor(n)).cloned().collect(),
    })
}

pub fn encoder_from_checkpoint(ck: &Checkpoint) -> Result<Encoder> {
    Encoder::from_tensors(&ck.config, ck.lookup())
}
