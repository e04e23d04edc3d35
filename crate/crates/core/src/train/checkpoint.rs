//! Binary checkpoints: `GGNN`, a little-endian `u32` version, a length-prefixed
//! UTF-8 metadata block, then named tensors (parameters followed by buffers).
//!
//! Each tensor is `u32` name length, name bytes, `u32` rank, `u64` dims and
//! little-endian `f64` values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Parameterized, Tensor};

const MAGIC: &[u8; 4] = b"GGNN";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form text, typically the run configuration.
    pub metadata: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(model: &mut dyn Parameterized, metadata: &str) -> Self {
        let mut tensors = Vec::new();
        model.visit_params(&mut |n, p| tensors.push((n.to_string(), p.value.clone())));
        model.visit_buffers(&mut |n, t| tensors.push((n.to_string(), t.clone())));
        Checkpoint {
            metadata: metadata.to_string(),
            tensors,
        }
    }

    /// Copy stored values into a model of the same architecture.
    pub fn restore(&self, model: &mut dyn Parameterized) -> Result<()> {
        let mut it = self.tensors.iter();
        let mut err = None;
        let mut take = |name: &str, dst: &mut Tensor| {
            if err.is_some() {
                return;
            }
            match it.next() {
                Some((n, t)) if n == name && t.dims() == dst.dims() => dst.data_mut().copy_from_slice(t.data()),
                Some((n, t)) => {
                    err = Some(Error::format(
                        "checkpoint",
                        format!("expected {name} {:?}, found {n} {:?}", dst.dims(), t.dims()),
                    ))
                }
                None => err = Some(Error::format("checkpoint", format!("missing tensor {name}"))),
            }
        };
        model.visit_params(&mut |n, p| take(n, &mut p.value));
        model.visit_buffers(&mut |n, t| take(n, t));
        if let Some(e) = err {
            return Err(e);
        }
        if it.next().is_some() {
            return Err(Error::format("checkpoint", "more tensors than the model has"));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.metadata);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let metadata = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::format("checkpoint", "tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::from_vec(dims, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Checkpoint { metadata, tensors })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", "truncated file"))?;
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("checkpoint", "name is not UTF-8"))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &mut dyn Parameterized, metadata: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, Checkpoint::capture(model, metadata).to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    Checkpoint::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
