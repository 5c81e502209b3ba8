//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   5 bytes   "ADPT1"
//! kind    u8        0 = full, 1 = delta
//! digest  32 bytes  SHA-256 of the model architecture config
//! count   u32       number of entries
//! entry*  path_len u32, path (UTF-8), rank u32, dims u64 × rank,
//!         values f64 × numel
//! ```
//!
//! A full checkpoint holds every parameter; a delta holds only the
//! trainable set of one task and is loaded on top of a full one.

use std::path::Path;

use crate::model::{Model, ParamSpec};
use crate::numerics::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 5] = b"ADPT1";
pub const HEADER_LEN: usize = 5 + 1 + 32 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Full,
    Delta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub digest: [u8; 32],
    pub entries: Vec<(String, Tensor)>,
}

/// Encoded size of one entry.
pub fn entry_len(path: &str, shape: &[usize]) -> usize {
    4 + path.len() + 4 + 8 * shape.len() + 8 * shape.iter().product::<usize>()
}

/// Encoded size of a checkpoint holding exactly `specs`.
pub fn encoded_len<'a>(specs: impl IntoIterator<Item = &'a ParamSpec>) -> usize {
    HEADER_LEN + specs.into_iter().map(|s| entry_len(&s.path, &s.shape)).sum::<usize>()
}

impl Checkpoint {
    pub fn full(model: &Model) -> Self {
        Checkpoint {
            kind: CheckpointKind::Full,
            digest: model.config().digest(),
            entries: model
                .params()
                .iter()
                .map(|p| (p.path().to_string(), p.tensor().clone().with_requires_grad(false)))
                .collect(),
        }
    }

    /// Only the currently trainable parameters.
    pub fn delta(model: &Model) -> Self {
        Checkpoint {
            kind: CheckpointKind::Delta,
            digest: model.config().digest(),
            entries: model
                .params()
                .iter()
                .filter(|p| p.trainable())
                .map(|p| (p.path().to_string(), p.tensor().clone().with_requires_grad(false)))
                .collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let size = HEADER_LEN
            + self
                .entries
                .iter()
                .map(|(p, t)| entry_len(p, t.shape()))
                .sum::<usize>();
        let mut out = Vec::with_capacity(size);
        out.extend_from_slice(MAGIC);
        out.push(match self.kind {
            CheckpointKind::Full => 0,
            CheckpointKind::Delta => 1,
        });
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (path, t) in &self.entries {
            out.extend_from_slice(&(path.len() as u32).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        debug_assert_eq!(out.len(), size);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let kind = match r.take(1)?[0] {
            0 => CheckpointKind::Full,
            1 => CheckpointKind::Delta,
            k => return Err(Error::Format(format!("unknown checkpoint kind {k}"))),
        };
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let path = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("parameter path is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.push((path, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last entry".into()));
        }
        Ok(Checkpoint { kind, digest, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies every entry into `model`.
    ///
    /// The architecture digest must match and every entry must name an
    /// existing parameter of the same shape. A full checkpoint must also
    /// cover every non-adapter parameter; adapters it lacks keep their
    /// identity initialization.
    pub fn apply_to(&self, model: &mut Model) -> Result<()> {
        if self.digest != model.config().digest() {
            return Err(Error::Mismatch("checkpoint was written for a different model config".into()));
        }
        for (path, t) in &self.entries {
            let p = model
                .param(path)
                .ok_or_else(|| Error::Mismatch(format!("model has no parameter `{path}`")))?;
            if p.tensor().shape() != t.shape() {
                return Err(Error::Mismatch(format!(
                    "`{path}`: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    p.tensor().shape()
                )));
            }
        }
        if self.kind == CheckpointKind::Full {
            let have: std::collections::HashSet<&str> = self.entries.iter().map(|(p, _)| p.as_str()).collect();
            if let Some(missing) = model
                .params()
                .iter()
                .find(|p| !p.spec().component.is_adapter() && !have.contains(p.path()))
            {
                return Err(Error::Mismatch(format!(
                    "full checkpoint lacks `{}`",
                    missing.path()
                )));
            }
        }
        for (path, t) in &self.entries {
            let p = model.param_mut(path).expect("checked above");
            p.tensor_mut().data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
