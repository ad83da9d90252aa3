//! Binary checkpoint format. All integers are little-endian.
//!
//! ```text
//! magic      4 bytes  "KDF1"
//! version    u32      1
//! config     u32 length, then UTF-8 `key = value` model config text
//! sections   u32 count, then per tensor:
//!              u32 name length, UTF-8 name
//!              u32 rank, rank × u64 dims
//!              4 × numel bytes of f32 payload
//! ```
//!
//! Sections appear in the model's parameter order and include batch-norm
//! running statistics.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::zoo::config::ModelConfig;
use crate::zoo::model::Model;

pub const MAGIC: [u8; 4] = *b"KDF1";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &Model<f32>) -> Vec<u8> {
    let params = model.params();
    let payload: usize = params.iter().map(|p| p.value.numel() * 4).sum();
    let mut out = Vec::with_capacity(payload + 4096);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &model.config.to_text());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        put_str(&mut out, &p.name);
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::CorruptHeader(format!("file ends inside {what}")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::CorruptHeader(format!("file ends inside {what}")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let bytes = self
            .take(len)
            .ok_or_else(|| Error::CorruptHeader(format!("file ends inside {what}")))?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::CorruptHeader(format!("{what} is not UTF-8")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r
        .take(4)
        .ok_or_else(|| {
            Error::CorruptHeader(format!("{} bytes is too short for a header", bytes.len()))
        })?
        .try_into()
        .unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let text = r.string("config")?;
    let config =
        ModelConfig::from_text(&text).map_err(|e| Error::CorruptHeader(format!("config: {e}")))?;
    let mut model = Model::<f32>::build_zeroed(&config)
        .map_err(|e| Error::CorruptHeader(format!("config: {e}")))?;
    let count = r.u32("section count")? as usize;
    let expected = model.params().len();
    if count != expected {
        return Err(Error::CorruptHeader(format!(
            "{count} tensor sections, config implies {expected}"
        )));
    }
    for (i, param) in model.params_mut().into_iter().enumerate() {
        let name = r.string("section name")?;
        if name != param.name {
            return Err(Error::CorruptHeader(format!(
                "section {i} is {name:?}, expected {:?}",
                param.name
            )));
        }
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::CorruptHeader(format!(
                "section {name:?} has rank {rank}"
            )));
        }
        let dims = (0..rank)
            .map(|_| r.u64("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != param.value.shape() {
            return Err(Error::DimensionMismatch {
                name,
                expected: param.value.shape().to_vec(),
                found: dims,
            });
        }
        let numel = param.value.numel();
        let raw = r
            .take(numel * 4)
            .ok_or_else(|| Error::TruncatedPayload(name.clone()))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        param.value = Tensor::from_parts(dims, data);
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptHeader(format!(
            "{} trailing bytes after the last section",
            bytes.len() - r.pos
        )));
    }
    Ok(model)
}

pub fn save(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
