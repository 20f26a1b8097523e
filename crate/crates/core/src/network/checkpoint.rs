//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "MTCOOLCK"
//! version      u32      1
//! spec hash    u64      NetSpec::hash of the architecture
//! task count   u32
//! tensor count u32
//! manifest     per tensor: name len u32, name utf-8, task u32, role u8
//!              (0 encoder, 1 head), ndim u32, dims u64 * ndim
//! payload      per tensor, in manifest order: f64 values
//! ```
//!
//! Tensors appear in partition order: encoder layers first (tasks ascending
//! within a layer, weight before bias), then heads.

use std::path::Path;

use super::{MultiTaskModel, NetSpec, Param, ParamRole, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MTCOOLCK";
const VERSION: u32 = 1;

pub fn write_checkpoint(model: &MultiTaskModel) -> Vec<u8> {
    let store = model.store();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.spec().hash().to_le_bytes());
    out.extend_from_slice(&(store.task_count() as u32).to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.task as u32).to_le_bytes());
        out.push(match p.role {
            ParamRole::Encoder => 0,
            ParamRole::Head => 1,
        });
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for p in store.iter() {
        for v in p.tensor.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint for a model with architecture `spec`.
pub fn read_checkpoint(bytes: &[u8], spec: &NetSpec) -> Result<MultiTaskModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hash = r.u64("spec hash")?;
    if hash != spec.hash() {
        return Err(Error::Checkpoint(format!(
            "architecture hash {hash:#018x} does not match {:#018x}",
            spec.hash()
        )));
    }
    let tasks = r.u32("task count")? as usize;
    if tasks == 0 {
        return Err(Error::Checkpoint("zero tasks".into()));
    }
    let count = r.u32("tensor count")? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
            .to_string();
        let task = r.u32("task")? as usize;
        let role = match r.take(1, "role")?[0] {
            0 => ParamRole::Encoder,
            1 => ParamRole::Head,
            x => return Err(Error::Checkpoint(format!("unknown role {x}"))),
        };
        let ndim = r.u32("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            dims.push(r.u64("dim")? as usize);
        }
        if task >= tasks {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` owned by task {task}"
            )));
        }
        manifest.push((name, task, role, dims));
    }
    let mut store = ParamStore::new(tasks);
    for (name, task, role, dims) in manifest {
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
        let raw = r.take(n.saturating_mul(8), &name)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.push(Param {
            name,
            task,
            role,
            tensor: Tensor::from_parts(dims, values),
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    MultiTaskModel::from_parts(spec.clone(), store)
}

pub fn save_checkpoint(model: &MultiTaskModel, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, spec: &NetSpec) -> Result<MultiTaskModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes, spec)
}
