//! Binary parameter checkpoints.
//!
//! Layout (all integers u32 little-endian): magic `PRWK`, version, entry
//! count, then per entry the name length, UTF-8 name bytes, rank, one extent
//! per axis and the row-major f32 values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"PRWK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn i32(&mut self, what: &str) -> Result<i32> {
        let b = self.take(4, what)?;
        Ok(i32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.pos as u64, format!("{what} too large")))?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn header(&mut self, version: u32) -> Result<()> {
        let magic = self.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}")));
        }
        let v = self.u32("version")?;
        if v != version {
            return Err(Error::format(4, format!("unsupported version {v}")));
        }
        Ok(())
    }
}

pub fn decode_checkpoint<T: Scalar>(buf: &[u8]) -> Result<ParamStore<T>> {
    let mut r = Reader::new(buf);
    r.header(CHECKPOINT_VERSION)?;
    let count = r.u32("entry count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = r.pos as u64;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(at + 4, "name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::format(r.pos as u64 - 4, format!("rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u32("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().product();
        let values = r.f32s(numel, "values")?;
        let data = values.into_iter().map(|x| T::from_f64_lossy(x as f64)).collect();
        store.insert(name, Tensor::new(&shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes"));
    }
    Ok(store)
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5));
        s.insert("b", Tensor::from_fn(&[4], |i| -(i as f32)));
        s
    }

    #[test]
    fn round_trip() {
        let bytes = encode_checkpoint(&sample());
        let back: ParamStore<f32> = decode_checkpoint(&bytes).unwrap();
        for (name, t) in sample().iter() {
            assert_eq!(back.get(name).unwrap().data(), t.data());
            assert_eq!(back.get(name).unwrap().shape(), t.shape());
        }
    }

    #[test]
    fn layout_is_exact() {
        let mut s = ParamStore::<f32>::new();
        s.insert("x", Tensor::new(&[1], vec![1.0]).unwrap());
        let b = encode_checkpoint(&s);
        // magic, version, count, name len, name, rank, extent, value
        assert_eq!(b.len(), 4 + 4 + 4 + 4 + 1 + 4 + 4 + 4);
        assert_eq!(&b[..4], b"PRWK");
        assert_eq!(&b[b.len() - 4..], &1.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = encode_checkpoint(&sample());
        let truncated = &bytes[..bytes.len() - 3];
        match decode_checkpoint::<f32>(truncated) {
            Err(Error::Format { offset, .. }) => assert!(offset > 12),
            other => panic!("expected format error, got {other:?}"),
        }
        bytes[0] = b'X';
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
