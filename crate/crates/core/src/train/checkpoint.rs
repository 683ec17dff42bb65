//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AFD1" | u32 version | [u8; 32] config digest
//! u32 n_meta    { str key | str value }
//! u32 n_blocks  { str name | u32 rank | u64 dims[rank] | f64 values[prod(dims)] }
//! u32 n_metrics { str name | f64 value }
//! ```
//!
//! where `str` is a `u32` byte length followed by UTF-8.

use std::fmt;
use std::fs;
use std::path::Path;

use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Param;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AFD1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// A named tensor stored at 64 bits.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: Digest,
    pub meta: Vec<(String, String)>,
    pub blocks: Vec<Block>,
    pub metrics: Vec<(String, f64)>,
}

impl Checkpoint {
    pub fn new(digest: Digest) -> Self {
        Checkpoint {
            digest,
            meta: Vec::new(),
            blocks: Vec::new(),
            metrics: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl fmt::Display) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing meta key {key}")))
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| *v)
    }

    pub fn push_param<T: Scalar>(&mut self, name: &str, p: &Param<T>) {
        self.blocks.push(Block {
            name: name.to_string(),
            dims: p.value().dims().to_vec(),
            values: p.value().data().iter().map(|v| v.to_f64_lossy()).collect(),
        });
    }

    pub fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter block {name}")))
    }

    /// Overwrites `p` with the block `name`; shapes must agree.
    pub fn restore_param<T: Scalar>(&self, name: &str, p: &mut Param<T>) -> Result<()> {
        let b = self.block(name)?;
        if b.dims != p.value().dims() {
            return Err(Error::Checkpoint(format!(
                "block {name} has shape {:?}, parameter expects {:?}",
                b.dims,
                p.value().dims()
            )));
        }
        let data = b.values.iter().map(|v| T::from_f64_lossy(*v)).collect();
        p.set_value(Tensor::from_vec(&b.dims, data)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest.0);
        put_u32(&mut out, self.meta.len());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.blocks.len());
        for b in &self.blocks {
            put_str(&mut out, &b.name);
            put_u32(&mut out, b.dims.len());
            for d in &b.dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &b.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_u32(&mut out, self.metrics.len());
        for (k, v) in &self.metrics {
            put_str(&mut out, k);
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let digest = Digest(r.take(32)?.try_into().unwrap());
        let mut ck = Checkpoint::new(digest);
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.push((k, v));
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(
                    usize::try_from(r.u64()?).map_err(|_| r.err("dimension overflows usize"))?,
                );
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| r.err(format!("block {name} larger than the file")))?;
            let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            ck.blocks.push(Block { name, dims, values });
        }
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.f64()?;
            ck.metrics.push((k, v));
        }
        if r.remaining() != 0 {
            return Err(r.err("trailing bytes after checkpoint"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint. When `expect` is given and differs from the stored
    /// digest the load is refused unless `force` is set.
    pub fn load(path: &Path, expect: Option<Digest>, force: bool) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck = Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(want) = expect {
            if want != ck.digest && !force {
                return Err(Error::Checkpoint(format!(
                    "{}: config digest {} does not match expected {want}",
                    path.display(),
                    ck.digest
                )));
            }
        }
        Ok(ck)
    }
}

fn put_u32(out: &mut Vec<u8>, n: usize) {
    out.extend_from_slice(&(n as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, m: impl fmt::Display) -> Error {
        Error::Checkpoint(format!("at byte {}: {m}", self.pos))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Checkpoint(format!("at byte {at}: invalid UTF-8")))
    }
}
