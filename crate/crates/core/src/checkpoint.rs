//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MTGN" | version u32 = 1 | count u32
//! per tensor: name_len u32 | name utf-8 | dtype u8 (1 = f32, 2 = f64)
//!             | rank u8 | extents u64 × rank | elements row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use ehr_autodiff::{Real, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MTGN";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn from_tensor<F: Real>(t: &Tensor<F>) -> Self {
        match F::DTYPE_CODE {
            DTYPE_F32 => Self::F32(t.cast()),
            _ => Self::F64(t.cast()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Self::F32(t) => t.shape(),
            Self::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> u8 {
        match self {
            Self::F32(_) => DTYPE_F32,
            Self::F64(_) => DTYPE_F64,
        }
    }

    pub fn cast<F: Real>(&self) -> Tensor<F> {
        match self {
            Self::F32(t) => t.cast(),
            Self::F64(t) => t.cast(),
        }
    }
}

/// Named tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, StoredTensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    /// Adds or replaces a tensor, keeping its original position on replace.
    pub fn insert(&mut self, name: impl Into<String>, t: StoredTensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn put<F: Real>(&mut self, name: impl Into<String>, t: &Tensor<F>) {
        self.insert(name, StoredTensor::from_tensor(t));
    }

    /// A scalar bookkeeping value, stored as a rank-0 f64 tensor.
    pub fn put_meta(&mut self, name: impl Into<String>, value: f64) {
        self.insert(name, StoredTensor::F64(Tensor::scalar(value)));
    }

    pub fn raw(&self, name: &str) -> Result<&StoredTensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn get<F: Real>(&self, name: &str) -> Result<Tensor<F>> {
        Ok(self.raw(name)?.cast())
    }

    /// Tensor `name` with the expected shape.
    pub fn get_shaped<F: Real>(&self, name: &str, shape: &[usize]) -> Result<Tensor<F>> {
        let t = self.get::<F>(name)?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn meta(&self, name: &str) -> Result<f64> {
        let t = self.get::<f64>(name)?;
        t.item()
            .ok_or_else(|| Error::Checkpoint(format!("{name:?} is not a scalar")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype());
            out.push(t.shape().len() as u8);
            for e in t.shape() {
                out.extend_from_slice(&(*e as u64).to_le_bytes());
            }
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                StoredTensor::F64(t) => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let count = r.u32()?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| {
                    let e = r.u64()?;
                    usize::try_from(e).map_err(|_| Error::Checkpoint(format!("extent {e} too large")))
                })
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, e| a.checked_mul(*e))
                .ok_or_else(|| Error::Checkpoint(format!("{name:?}: element count overflows")))?;
            let t = match dtype {
                DTYPE_F32 => {
                    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                    StoredTensor::F32(Tensor::new(shape, data)?)
                }
                DTYPE_F64 => {
                    let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
                    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                    StoredTensor::F64(Tensor::new(shape, data)?)
                }
                other => return Err(Error::Checkpoint(format!("{name:?}: unknown dtype code {other}"))),
            };
            if ck.contains(&name) {
                return Err(Error::Checkpoint(format!("duplicate tensor {name:?}")));
            }
            ck.entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ck)
    }

    /// Writes to a sibling temporary file and renames it into place, so an
    /// interrupted write never clobbers an existing checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// True when the file starts with the checkpoint magic bytes.
pub fn is_checkpoint(path: &Path) -> bool {
    use std::io::Read;
    let mut buf = [0u8; 4];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut buf))
        .is_ok_and(|_| &buf == MAGIC)
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
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
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
