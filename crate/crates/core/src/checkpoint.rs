//! Binary model checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "LPLM" | u32 version
//! u32 len | model config as JSON
//! u32 count | count × (u32 len | name | u8 dtype | u32 ndim | ndim × u64 dim | f64 data…)
//! u32 count | count × (u32 len | nested layer prefix | u64 r_max)
//! ```

use std::path::Path;

use crate::engine::{ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::transformer::{Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"LPLM";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

fn registry(model: &Model) -> Vec<(String, u64)> {
    model
        .nested_layers()
        .map(|(c, l)| (format!("blocks.{}.{}.nlpn", c.block, c.family), l.r_max() as u64))
        .collect()
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config()).map_err(|e| Error::Format(e.to_string()))?;
    put_bytes(&mut out, &config);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (_, name, t) in model.params().iter() {
        put_bytes(&mut out, name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let reg = registry(model);
    out.extend_from_slice(&(reg.len() as u32).to_le_bytes());
    for (prefix, r) in &reg {
        put_bytes(&mut out, prefix.as_bytes());
        out.extend_from_slice(&r.to_le_bytes());
    }
    Ok(out)
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads version {VERSION})"
        )));
    }
    let config: ModelConfig = serde_json::from_slice(r.bytes()?)
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let mut store = ParameterStore::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        if r.u8()? != DTYPE_F64 {
            return Err(Error::Checkpoint(format!("{name}: unsupported dtype")));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store
            .insert(name, Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    let mut reg = Vec::new();
    for _ in 0..r.u32()? {
        reg.push((r.string()?, r.u64()?));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after registry".into()));
    }
    let model = Model::from_store(config, store).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if registry(&model) != reg {
        return Err(Error::Checkpoint("nested layer registry does not match parameters".into()));
    }
    Ok(model)
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    atomic_write(path, &encode(model)?)
}

pub fn load(path: &Path) -> Result<Model> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
