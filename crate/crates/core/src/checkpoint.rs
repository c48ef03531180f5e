//! Binary parameter checkpoints (`.dlcp`). The byte layout is documented in
//! `docs/formats.md`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{numel, DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"DLCP";
pub const VERSION: u32 = 1;

/// One stored tensor, kept as raw little-endian bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl Record {
    pub fn from_tensor<F: Real>(name: &str, t: &Tensor<F>) -> Self {
        let mut data = Vec::with_capacity(t.len() * F::DTYPE.size());
        for &x in t.data() {
            x.write_le(&mut data);
        }
        Self { name: name.to_string(), dtype: F::DTYPE, shape: t.shape().to_vec(), data }
    }

    /// Decodes into element type `F`, converting if the stored type differs.
    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        let size = self.dtype.size();
        let data = self
            .data
            .chunks_exact(size)
            .map(|b| match self.dtype {
                DType::F32 => F::from_f64(f32::read_le(b) as f64),
                DType::F64 => F::from_f64(f64::read_le(b)),
            })
            .collect();
        Tensor::new(&self.shape, data).expect("validated on read")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    /// Resolved configuration text of the run that wrote the file.
    pub config: String,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn from_params<F: Real>(config: &str, params: &ParamStore<F>) -> Self {
        Self {
            config: config.to_string(),
            records: params.iter().map(|(name, t)| Record::from_tensor(name, t)).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.dtype as u8);
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &e in &r.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            out.extend_from_slice(&r.data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::checkpoint("missing DLCP magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::checkpoint(format!("unsupported format version {version}")));
        }
        let config_len = r.u32()? as usize;
        let config = String::from_utf8(r.take(config_len)?.to_vec())
            .map_err(|_| Error::checkpoint("config echo is not valid UTF-8"))?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::checkpoint("parameter name is not valid UTF-8"))?;
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::checkpoint(format!("`{name}`: unknown dtype tag {tag}")))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let len = numel(&shape)
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::checkpoint(format!("`{name}`: extents {shape:?} overflow")))?;
            let data = r.take(len)?.to_vec();
            records.push(Record { name, dtype, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Overwrites every parameter of `params` from the record of the same
    /// name; names, count and shapes must match exactly.
    pub fn restore<F: Real>(&self, params: &mut ParamStore<F>) -> Result<()> {
        if self.records.len() != params.len() {
            return Err(Error::checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                self.records.len(),
                params.len()
            )));
        }
        for r in &self.records {
            let id = params.id(&r.name).ok_or_else(|| Error::checkpoint(format!("unknown parameter `{}`", r.name)))?;
            if params.get(id).shape() != r.shape.as_slice() {
                return Err(Error::checkpoint(format!(
                    "`{}`: stored shape {:?}, model expects {:?}",
                    r.name,
                    r.shape,
                    params.get(id).shape()
                )));
            }
            *params.get_mut(id) = r.to_tensor();
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::checkpoint(format!("truncated at byte {} (needed {n} more)", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
