//! Little-endian binary containers.
//!
//! Three files share this encoding: feature tensors (`SWFT`), model
//! checkpoints (`SWCK`) and episode datasets (`SWEP`). Each starts with a
//! four-byte magic and a `u32` version. Integers are little-endian `u32`/`u64`,
//! reals are little-endian IEEE-754 `f64`, strings are a `u32` byte length
//! followed by UTF-8.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported version {version} at byte {offset}")]
    Version { version: u32, offset: usize },
    #[error("truncated input at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("invalid data at byte {offset}: {msg}")]
    Invalid { offset: usize, msg: String },
    #[error("{trailing} trailing bytes after byte {offset}")]
    Trailing { offset: usize, trailing: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_header(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Self::new();
        w.bytes(magic);
        w.u32(version);
        w
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.f64(*v);
        }
    }

    pub fn len_u32(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length fits in u32"));
    }

    pub fn str(&mut self, s: &str) {
        self.len_u32(s.len());
        self.bytes(s.as_bytes());
    }

    /// Rank, dims, then row-major values.
    pub fn tensor(&mut self, t: &Tensor) {
        self.len_u32(t.shape().len());
        for d in t.shape() {
            self.len_u32(*d);
        }
        self.f64s(t.data());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    /// Check magic and return the version, which must be in `1..=max_version`.
    pub fn header(buf: &'a [u8], magic: &[u8; 4], max_version: u32) -> Result<(Self, u32), FormatError> {
        let mut r = Self::new(buf);
        let found = r.take(4)?;
        if found != magic {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        let offset = r.pos;
        let version = r.u32()?;
        if version == 0 || version > max_version {
            return Err(FormatError::Version { version, offset });
        }
        Ok((r, version))
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - self.remaining(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A `u32` count, rejected when `min_bytes_each` per item cannot fit in the rest of the input.
    pub fn count(&mut self, min_bytes_each: usize) -> Result<usize, FormatError> {
        let offset = self.pos;
        let n = self.u32()? as usize;
        if n.saturating_mul(min_bytes_each) > self.remaining() {
            return Err(FormatError::Truncated {
                offset,
                needed: n * min_bytes_each - self.remaining(),
            });
        }
        Ok(n)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.invalid("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn str(&mut self) -> Result<String, FormatError> {
        let n = self.count(1)?;
        let offset = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|e| FormatError::Invalid {
            offset,
            msg: e.to_string(),
        })
    }

    pub fn tensor(&mut self) -> Result<Tensor, FormatError> {
        let offset = self.pos;
        let rank = self.count(4)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| self.invalid("tensor size overflow"))?;
        let data = self.f64s(n)?;
        Tensor::new(&shape, data).map_err(|e| FormatError::Invalid {
            offset,
            msg: e.to_string(),
        })
    }

    pub fn invalid(&self, msg: impl Into<String>) -> FormatError {
        FormatError::Invalid {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    pub fn finish(self) -> Result<(), FormatError> {
        if self.remaining() != 0 {
            return Err(FormatError::Trailing {
                offset: self.pos,
                trailing: self.remaining(),
            });
        }
        Ok(())
    }
}

/// Write via a temporary sibling file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = match dir {
        Some(d) => d.join(format!(".{file_name}.tmp")),
        None => Path::new(&format!(".{file_name}.tmp")).to_path_buf(),
    };
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_reports_offset() {
        let mut w = Writer::with_header(b"TEST", 1);
        w.u64(7);
        let bytes = w.finish();
        let (mut r, v) = Reader::header(&bytes[..10], b"TEST", 1).unwrap();
        assert_eq!(v, 1);
        match r.u64() {
            Err(FormatError::Truncated { offset, needed }) => assert_eq!((offset, needed), (8, 6)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let bytes = Writer::with_header(b"ABCD", 3).finish();
        assert!(matches!(
            Reader::header(&bytes, b"ABCE", 3),
            Err(FormatError::BadMagic { .. })
        ));
        assert!(matches!(
            Reader::header(&bytes, b"ABCD", 2),
            Err(FormatError::Version { version: 3, offset: 4 })
        ));
    }

    #[test]
    fn huge_counts_do_not_allocate() {
        let mut w = Writer::with_header(b"TEST", 1);
        w.u32(u32::MAX);
        let bytes = w.finish();
        let (mut r, _) = Reader::header(&bytes, b"TEST", 1).unwrap();
        assert!(matches!(r.count(8), Err(FormatError::Truncated { .. })));
    }
}
