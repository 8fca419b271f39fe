//! Little-endian helpers shared by the binary file formats.
//!
//! Every format starts with an 8-byte ASCII magic followed by `u32` header
//! fields; payloads are read from a fully buffered file so truncation can be
//! reported with exact byte counts.

use std::fs;
use std::path::Path;

use crate::{AdsqError, Result};

pub(crate) const MAGIC_LEN: usize = 8;

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    /// Checks the magic and positions the cursor after it.
    pub(crate) fn new(buf: &'a [u8], magic: &[u8; MAGIC_LEN], what: &'static str) -> Result<Self> {
        if buf.is_empty() {
            return Err(AdsqError::Format(format!("{what}: empty file")));
        }
        if buf.len() < MAGIC_LEN || &buf[..MAGIC_LEN] != magic {
            return Err(AdsqError::Format(format!(
                "{what}: bad magic, expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(Reader { buf, pos: MAGIC_LEN, what })
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(AdsqError::Format(format!(
                "{}: truncated, needed {} bytes at offset {}, file has {}",
                self.what,
                len,
                self.pos,
                self.buf.len()
            ))),
        }
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(f64::from_le_bytes(a))
    }

    /// Byte count of a `rows × cols` payload with `elem` bytes per entry,
    /// rejecting header values that would overflow.
    pub(crate) fn payload_len(&self, rows: u32, cols: u32, elem: usize) -> Result<usize> {
        (rows as usize)
            .checked_mul(cols as usize)
            .and_then(|v| v.checked_mul(elem))
            .ok_or_else(|| AdsqError::Format(format!("{}: header dimensions overflow", self.what)))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(AdsqError::Format(format!(
                "{}: {} trailing bytes after payload",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| AdsqError::Io(e).context(path.display()))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| AdsqError::Io(e).context(path.display()))
}

pub(crate) fn header(magic: &[u8; MAGIC_LEN], fields: &[u32], payload_hint: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC_LEN + 4 * fields.len() + payload_hint);
    out.extend_from_slice(magic);
    for f in fields {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out
}

pub(crate) fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| AdsqError::Argument(format!("{what} = {v} does not fit in u32")))
}
