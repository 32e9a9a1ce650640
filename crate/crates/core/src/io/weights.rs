//! Binary weights container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "UCNW0001"
//! version      u32      1
//! count        u32      number of tensors
//! manifest     count x { name_len u32, name (UTF-8), dims 4 x u32, offset u64 }
//! payload_len  u64      bytes
//! payload      f32 values, little-endian; each tensor at `offset` bytes
//!              from the payload start
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"UCNW0001";
pub const VERSION: u32 = 1;

pub fn encode_weights<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        for d in p.value.shape().dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * p.value.numel() as u64;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for (_, p) in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

/// One decoded manifest entry with its values.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub tensor: Tensor<f32>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::Malformed(format!("weights file truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<WeightEntry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Malformed("bad weights magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Unsupported(format!("weights version {version}")));
    }
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Malformed("weight name is not UTF-8".into()))?
            .to_owned();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let offset = r.u64()?;
        manifest.push((name, Shape::from(dims), offset));
    }
    let payload_len = r.u64()?;
    let payload = &bytes[r.pos..];
    if payload.len() as u64 != payload_len {
        return Err(Error::Malformed(format!(
            "payload holds {} bytes, manifest declares {payload_len}",
            payload.len()
        )));
    }
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.len());
    let mut entries = Vec::with_capacity(manifest.len());
    for (name, shape, offset) in &manifest {
        let len = 4 * shape.numel() as u64;
        let end = offset
            .checked_add(len)
            .filter(|&e| e <= payload_len)
            .ok_or_else(|| Error::Malformed(format!("`{name}` extends past the payload")))?;
        spans.push((*offset, end, name));
        let raw = &payload[*offset as usize..end as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push(WeightEntry {
            name: name.clone(),
            tensor: Tensor::new(*shape, data)?,
        });
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::Malformed(format!(
                "`{}` overlaps `{}`",
                w[1].2, w[0].2
            )));
        }
    }
    if spans.iter().map(|s| s.1 - s.0).sum::<u64>() != payload_len {
        return Err(Error::Malformed("payload has unclaimed bytes".into()));
    }
    Ok(entries)
}

pub fn save_weights<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_weights(&model.store)).map_err(|e| Error::io(path, e))
}

/// Overwrites every parameter of `store` from decoded entries. Names and
/// shapes must match one to one.
pub fn assign_weights<T: Real>(store: &mut ParamStore<T>, entries: &[WeightEntry]) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Shape(format!(
            "weights file has {} tensors, model has {}",
            entries.len(),
            store.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for e in entries {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::Malformed(format!("`{}` appears twice", e.name)));
        }
        let id = store
            .find(&e.name)
            .ok_or_else(|| Error::Shape(format!("model has no parameter `{}`", e.name)))?;
        let want = store.get(id).shape();
        if e.tensor.shape() != want {
            return Err(Error::Shape(format!(
                "parameter `{}`: file shape {}, model shape {want}",
                e.name,
                e.tensor.shape()
            )));
        }
        *store.get_mut(id) = e.tensor.cast();
    }
    Ok(())
}

/// Loads weights into a model already built for the matching configuration.
pub fn load_weights<T: Real>(model: &mut Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    assign_weights(&mut model.store, &decode_weights(&bytes)?)
}
