//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "ASUCNNCK"
//! version  u32      1
//! act      u8       activation tag (0 asu, 1 gcu, 2 relu)
//! meta     u32 length + UTF-8 JSON (architecture and training config)
//! count    u32      number of tensors
//! tensor*  u16 name length, name, u8 rank, rank × u32 dims, f32 values
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activations::ActivationKind;
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelParams, PARAM_NAMES};
use crate::tensor::{Tensor, MAX_RANK};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"ASUCNNCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: Option<Architecture>,
    pub config: Option<TrainConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub activation: ActivationKind,
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(params: &ModelParams<f32>, config: Option<&TrainConfig>) -> Self {
        Checkpoint {
            activation: params.arch.activation,
            meta: CheckpointMeta {
                arch: Some(params.arch),
                config: config.cloned(),
            },
            tensors: params
                .named_tensors()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::InvalidCheckpoint(format!("metadata: {e}")))?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 4 + 32).sum();
        let mut out = Vec::with_capacity(32 + meta.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.activation.tag());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::InvalidCheckpoint(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dims().len() as u8);
            for &d in t.dims() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::InvalidCheckpoint(format!("dimension {d} too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic);
        }
        r.pos = MAGIC.len();
        let version = u32::from_le_bytes(r.array("version")?);
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let tag = r.take(1, "activation")?[0];
        let activation = ActivationKind::from_tag(tag)
            .ok_or_else(|| Error::InvalidCheckpoint(format!("unknown activation tag {tag}")))?;
        let meta_len = u32::from_le_bytes(r.array("metadata length")?) as usize;
        let meta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::InvalidCheckpoint(format!("metadata: {e}")))?;
        let count = u32::from_le_bytes(r.array("tensor count")?) as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let name_len = u16::from_le_bytes(r.array("tensor name length")?) as usize;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| Error::InvalidCheckpoint(format!("tensor {i} name is not UTF-8")))?;
            let rank = r.take(1, "tensor rank")?[0] as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(Error::InvalidCheckpoint(format!(
                    "tensor {name}: rank {rank}"
                )));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(r.array("tensor dims")?) as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::InvalidCheckpoint(format!("tensor {name}: dims overflow")))?;
            let raw = r.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| Error::InvalidCheckpoint(format!("tensor {name} too large")))?,
                "tensor data",
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::from_vec(&dims, data)
                .map_err(|e| Error::InvalidCheckpoint(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::InvalidCheckpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            activation,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuild the network the checkpoint describes.
    pub fn into_model(self) -> Result<ModelParams<f32>> {
        let arch = self
            .meta
            .arch
            .ok_or_else(|| Error::InvalidCheckpoint("no architecture recorded".into()))?;
        if arch.activation != self.activation {
            return Err(Error::InvalidCheckpoint(format!(
                "activation tag {} disagrees with architecture {}",
                self.activation, arch.activation
            )));
        }
        let names: Vec<&str> = self.tensors.iter().map(|(n, _)| n.as_str()).collect();
        if names != PARAM_NAMES {
            return Err(Error::InvalidCheckpoint(format!(
                "unexpected tensors {names:?}"
            )));
        }
        let tensors = self.tensors.into_iter().map(|(_, t)| t).collect();
        ModelParams::from_tensors(arch, tensors)
            .map_err(|e| Error::InvalidCheckpoint(e.to_string()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Truncated(format!("while reading {what} at byte {}", self.pos))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }
}

pub fn save_checkpoint(path: &Path, params: &ModelParams<f32>, config: &TrainConfig) -> Result<()> {
    Checkpoint::from_model(params, Some(config)).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, Option<TrainConfig>)> {
    let ckpt = Checkpoint::load(path)?;
    let config = ckpt.meta.config.clone();
    Ok((ckpt.into_model()?, config))
}
