//! Flat binary parameter files.
//!
//! Layout (all integers little-endian `u32`):
//! `"PMND"`, version, tensor count, then per tensor: name length, UTF-8 name,
//! rank, dims, element width in bytes (4 or 8), raw little-endian elements.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PMND";
pub const VERSION: u32 = 1;

pub fn encode<T: Real>(tensors: &[(String, Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Load(format!("truncated file at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes a parameter file; elements of either width are converted to `T`.
pub fn decode<T: Real>(buf: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { buf, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Load("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Load(format!("unsupported format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Load("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let width = r.u32()? as usize;
        let len: usize = dims.iter().product();
        let raw = r.take(len * width)?;
        let data: Vec<T> = match width {
            4 => raw.chunks(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
            8 => raw.chunks(8).map(|c| T::of(f64::read_le(c))).collect(),
            w => return Err(Error::Load(format!("tensor `{name}` has element width {w}"))),
        };
        let t = Tensor::new(dims, data).map_err(|e| Error::Load(format!("tensor `{name}`: {e}")))?;
        out.push((name, t));
    }
    if r.at != buf.len() {
        return Err(Error::Load("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

/// Writes atomically: temp file in the same directory, then rename.
pub fn save<T: Real>(path: &Path, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    write_atomic(path, &encode(tensors))
}

pub fn load<T: Real>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let buf = fs::read(path)
        .map_err(|e| Error::Load(format!("cannot read {}: {e}", path.display())))?;
    decode(&buf)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// A `u64` as four 16-bit limbs, exact in either element width.
pub fn u64_tensor<T: Real>(x: u64) -> Tensor<T> {
    let limbs: Vec<T> = (0..4).map(|i| T::of(((x >> (16 * i)) & 0xffff) as f64)).collect();
    Tensor::new(vec![4], limbs).expect("four limbs")
}

pub fn tensor_u64<T: Real>(t: &Tensor<T>) -> u64 {
    t.data()
        .iter()
        .enumerate()
        .fold(0, |acc, (i, v)| acc | ((v.f64() as u64) << (16 * i)))
}
