//! Binary weight file.
//!
//! ```text
//! "MAFW" | version: u32 | count: u32 | entry*
//! entry = name_len: u32 | name: utf-8 | dtype: u8 | rank: u8 | dims: u32 * rank | payload
//! ```
//!
//! All integers and payload values are little-endian. dtype 0 is f32. Entries
//! follow the model's parameter traversal order, so saving the same model
//! twice gives identical bytes.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result, WeightError};
use crate::nn::Layer;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MAFW";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(DTYPE_F32);
        out.push(e.dims.len() as u8);
        for &d in &e.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &e.data {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightError> {
        if self.buf.len() - self.pos < n {
            return Err(WeightError::Truncated {
                offset: self.pos,
                needed: n,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WeightError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WeightError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Entry>, WeightError> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(WeightError::BadMagic { found: magic });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(WeightError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| WeightError::BadName { offset: at })?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(WeightError::UnknownDtype {
                code: dtype,
                name,
                version,
            });
        }
        let rank = r.u8()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let bytes = r.take(n * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push(Entry { name, dims, data });
    }
    if r.pos != buf.len() {
        return Err(WeightError::TrailingBytes(buf.len() - r.pos));
    }
    Ok(entries)
}

/// Every parameter and buffer of `model`, in traversal order.
pub fn entries<L: Layer<f32> + ?Sized>(model: &L) -> Vec<Entry> {
    let mut out = Vec::new();
    model.visit(&mut |name, p| {
        out.push(Entry {
            name: name.to_string(),
            dims: p.value.shape().0.to_vec(),
            data: p.value.data().to_vec(),
        })
    });
    out
}

pub fn to_bytes<L: Layer<f32> + ?Sized>(model: &L) -> Vec<u8> {
    encode(&entries(model))
}

pub fn save<L: Layer<f32> + ?Sized>(model: &L, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

/// Replaces every parameter of `model` with the matching entry. Fused
/// weights are restored when the file has them and dropped when it does not.
pub fn from_bytes<L: Layer<f32> + ?Sized>(model: &mut L, buf: &[u8]) -> Result<()> {
    let list = decode(buf)?;
    let has_fused = list.iter().any(|e| is_fused_name(&e.name));
    if has_fused {
        // Creates the fused slots; their values are overwritten below.
        model.set_training(false);
        model.fuse()?;
    } else {
        model.unfuse();
    }
    let mut by_name: HashMap<String, Entry> = HashMap::with_capacity(list.len());
    for e in list {
        by_name.insert(e.name.clone(), e);
    }
    let mut err: Option<Error> = None;
    model.visit_mut(&mut |name, p| {
        if err.is_some() {
            return;
        }
        let Some(e) = by_name.remove(name) else {
            err = Some(WeightError::MissingEntry(name.to_string()).into());
            return;
        };
        if e.dims != p.value.shape().0 {
            err = Some(
                WeightError::DimMismatch {
                    name: e.name,
                    expected: p.value.shape().0.to_vec(),
                    found: e.dims,
                }
                .into(),
            );
            return;
        }
        p.value = Tensor::new(p.value.shape(), e.data).expect("dims checked");
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = by_name.into_keys().min() {
        return Err(WeightError::UnexpectedEntry(name).into());
    }
    Ok(())
}

pub fn load<L: Layer<f32> + ?Sized>(model: &mut L, path: &Path) -> Result<()> {
    let buf = std::fs::read(path)?;
    from_bytes(model, &buf)
}

fn is_fused_name(name: &str) -> bool {
    name.split('.').any(|s| s == "fused")
}
