//! FPQT tensor container.
//!
//! ```text
//! magic   "FPQT"
//! version u8 = 1
//! count   u32 LE
//! entry*  name_len u16 LE | name utf-8 | dtype u8 (0 = f32) | ndim u8
//!         | dims u64 LE * ndim | payload f32 LE, row-major
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FPQT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

pub type TensorMap<T> = BTreeMap<String, Tensor<T>>;

pub fn write_tensors<T: Scalar>(path: impl AsRef<Path>, tensors: &TensorMap<T>) -> Result<()> {
    let bytes = encode(tensors)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_tensors<T: Scalar>(path: impl AsRef<Path>) -> Result<TensorMap<T>> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}

pub fn encode<T: Scalar>(tensors: &TensorMap<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let count = u32::try_from(tensors.len()).map_err(|_| Error::param("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::param(format!("tensor name too long: {} bytes", name.len())))?;
        let ndim = u8::try_from(t.ndim())
            .map_err(|_| Error::param(format!("tensor {name} has too many axes")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(ndim);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            let v = v.to_f32().unwrap_or(f32::NAN);
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "tensor {name} holds a value that is not a finite f32"
                )));
            }
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<TensorMap<T>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        cur.pos = 0;
        return Err(cur.err("bad magic, expected \"FPQT\""));
    }
    let version = cur.u8("version")?;
    if version != VERSION {
        cur.pos -= 1;
        return Err(cur.err(format!("unsupported version {version}")));
    }
    let count = cur.u32("entry count")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_at = cur.pos;
        let name_len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::Format {
                offset: name_at as u64 + 2,
                msg: "tensor name is not valid UTF-8".into(),
            })?
            .to_owned();
        let dtype = cur.u8("dtype")?;
        if dtype != DTYPE_F32 {
            cur.pos -= 1;
            return Err(cur.err(format!("unsupported dtype tag {dtype}")));
        }
        let ndim = cur.u8("ndim")? as usize;
        if ndim == 0 {
            cur.pos -= 1;
            return Err(cur.err("tensor has zero axes"));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = cur.u64("dimension")?;
            if d == 0 {
                cur.pos -= 8;
                return Err(cur.err("zero-length dimension"));
            }
            shape.push(usize::try_from(d).map_err(|_| cur.err("dimension overflows usize"))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| cur.err("tensor size overflows"))?;
        let payload_at = cur.pos;
        let payload = cur.take(numel * 4, "payload")?;
        let mut data = Vec::with_capacity(numel);
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Format {
                    offset: (payload_at + 4 * i) as u64,
                    msg: format!("non-finite value in tensor {name}"),
                });
            }
            data.push(T::lit(v as f64));
        }
        if out.contains_key(&name) {
            return Err(Error::Format {
                offset: name_at as u64,
                msg: format!("duplicate tensor name {name}"),
            });
        }
        out.insert(name, Tensor::new(shape, data)?);
    }
    if cur.pos != bytes.len() {
        return Err(cur.err("trailing bytes after last entry"));
    }
    Ok(out)
}
