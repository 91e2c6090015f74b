//! The `BSBT` parameter file.
//!
//! ```text
//! "BSBT"  u32 version
//! u32 meta_len  meta_len bytes of UTF-8 "key=value\n" lines (sorted by key)
//! u32 count
//! count × { u32 name_len, name bytes, u8 dtype, u32 rank, rank × u64 extent, payload }
//! ```
//!
//! All integers are little-endian. The only dtype is `1` (f64), whose payload
//! is the row-major values as little-endian IEEE-754 doubles.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BSBT";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;
/// Prefix of the metadata keys that hold the model configuration.
pub const MODEL_PREFIX: &str = "model.";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Every parameter and buffer of `model`, in store order, with the model
    /// configuration in the metadata.
    pub fn from_model(model: &Model) -> Self {
        let mut meta = BTreeMap::new();
        for line in model.config.to_kv().lines() {
            if let Some((k, v)) = line.split_once('=') {
                meta.insert(format!("{MODEL_PREFIX}{k}"), v.to_string());
            }
        }
        let tensors = model
            .store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect();
        Self { meta, tensors }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let kv: String = self
            .meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(MODEL_PREFIX).map(|k| format!("{k}={v}\n")))
            .collect();
        ModelConfig::from_kv(&kv)
    }

    /// Rebuilds the architecture from the metadata and loads every tensor
    /// strictly.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.model_config()?, 0)?;
        self.load_into(&mut model.store)?;
        Ok(model)
    }

    /// Strict load: the names in the file and in `store` must coincide and
    /// every extent must match.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, t) in &self.tensors {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name:?}")))?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored extents {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Checkpoint(format!("duplicate tensor {name:?}")));
            }
            store.set(id, t.clone())?;
        }
        if let Some(e) = store.entries().iter().find(|e| !seen.contains(e.name.as_str())) {
            return Err(Error::Checkpoint(format!("missing tensor {:?}", e.name)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut meta = String::new();
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("metadata entry {k:?} is not a single key=value line")));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        put_len(&mut out, meta.len())?;
        out.extend_from_slice(meta.as_bytes());
        put_len(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_len(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            put_len(&mut out, t.rank())?;
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return r.fail(0, "bad magic, expected \"BSBT\"");
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != VERSION {
            return r.fail(at, format!("unsupported version {version}"));
        }
        let len = r.u32()? as usize;
        let at = r.pos;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| r.error(at, format!("metadata: {e}")))?;
        let mut meta = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| r.error(at, format!("metadata line {line:?} lacks '='")))?;
            if meta.insert(k.to_string(), v.to_string()).is_some() {
                return r.fail(at, format!("duplicate metadata key {k:?}"));
            }
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| r.error(at, format!("tensor name: {e}")))?
                .to_string();
            let at = r.pos;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return r.fail(at, format!("{name}: unknown dtype {dtype}"));
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            let mut numel = 1usize;
            for _ in 0..rank {
                let at = r.pos;
                let d = usize::try_from(r.u64()?).map_err(|_| r.error(at, "extent overflows usize"))?;
                numel = numel.checked_mul(d).ok_or_else(|| r.error(at, "element count overflows"))?;
                shape.push(d);
            }
            let bytes_len = numel.checked_mul(8).ok_or_else(|| r.error(r.pos, "payload size overflows"))?;
            let payload = r.take(bytes_len)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Format {
            what: "checkpoint",
            offset,
            detail: detail.into(),
        }
    }

    fn fail<T>(&self, offset: usize, detail: impl Into<String>) -> Result<T> {
        Err(self.error(offset, detail))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(self.bytes.len(), format!("truncated: needed {n} bytes at {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
