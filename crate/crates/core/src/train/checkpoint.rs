//! Binary checkpoints: magic `DRAG`, a `u32` version, a tensor table and a
//! `key=value` metadata block. All integers and values are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::DragParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DRAG";
pub const VERSION: u32 = 1;

/// Ordered `key=value` metadata.
pub type Metadata = BTreeMap<String, String>;

pub fn encode(tensors: &[(String, &Tensor)], meta: &Metadata) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.path, format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &str) -> Result<(Vec<(String, Tensor)>, Metadata)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "bad magic, not a checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let n = n.filter(|&n| n <= bytes.len() / 8).ok_or_else(|| {
            Error::format(path, format!("tensor {name} claims shape {shape:?}, larger than the file"))
        })?;
        let data = r
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(path, "metadata is not UTF-8"))?;
    let mut meta = Metadata::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("metadata line {line:?} is not key=value")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((tensors, meta))
}

pub fn save_checkpoint(params: &DragParams, meta: &Metadata, path: &Path) -> Result<()> {
    let tensors: Vec<(String, &Tensor)> = params.tensors().into_iter().map(|p| (p.name, p.tensor)).collect();
    fs::write(path, encode(&tensors, meta))?;
    Ok(())
}

/// Raw tensor table and metadata.
pub fn read_checkpoint(path: &Path) -> Result<(Vec<(String, Tensor)>, Metadata)> {
    let bytes = fs::read(path).map_err(|e| Error::format(path.display(), e.to_string()))?;
    decode(&bytes, &path.display().to_string())
}

/// Copies stored tensors into `params`, which fixes the expected names and
/// shapes.
pub fn restore(params: &mut DragParams, tensors: Vec<(String, Tensor)>, path: &str) -> Result<()> {
    let mut slots = params.tensors_mut();
    if slots.len() != tensors.len() {
        return Err(Error::format(
            path,
            format!("checkpoint holds {} tensors, model expects {}", tensors.len(), slots.len()),
        ));
    }
    for (slot, (name, t)) in slots.iter_mut().zip(tensors) {
        if slot.name != name {
            return Err(Error::format(path, format!("expected tensor {}, found {name}", slot.name)));
        }
        if slot.tensor.shape() != t.shape() {
            return Err(Error::format(
                path,
                format!(
                    "shape mismatch for tensor {name}: checkpoint {:?}, model {:?}",
                    t.shape(),
                    slot.tensor.shape()
                ),
            ));
        }
        slot.tensor.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

/// Loads into parameters shaped like `template`.
pub fn load_checkpoint(path: &Path, template: &DragParams) -> Result<(DragParams, Metadata)> {
    let (tensors, meta) = read_checkpoint(path)?;
    let mut params = template.clone();
    restore(&mut params, tensors, &path.display().to_string())?;
    Ok((params, meta))
}
