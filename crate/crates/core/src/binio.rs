//! Little-endian helpers shared by the binary file formats.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar};

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

/// Appends `values` in the requested on-disk precision.
pub(crate) fn put_values<T: Scalar>(out: &mut Vec<u8>, values: &[T], precision: Precision) {
    match precision {
        Precision::F32 => values
            .iter()
            .for_each(|v| (v.to_f32().expect("float")).write_le(out)),
        Precision::F64 => values
            .iter()
            .for_each(|v| (v.to_f64().expect("float")).write_le(out)),
    }
}

/// Cursor over an in-memory file with path-aware errors.
pub(crate) struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Reader {
            path,
            bytes,
            pos: 0,
        }
    }

    pub fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, msg)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub fn expect_version(&mut self, version: u32) -> Result<()> {
        let got = self.u32()?;
        if got != version {
            return Err(self.err(format!("unsupported version {got}, expected {version}")));
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn precision(&mut self) -> Result<Precision> {
        let code = self.u32()?;
        Precision::from_code(code).ok_or_else(|| self.err(format!("unknown precision code {code}")))
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.usize()?;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("string is not UTF-8"))
    }

    /// Reads `n` values stored at `precision`, converting to `T`.
    pub fn values<T: Scalar>(&mut self, n: usize, precision: Precision) -> Result<Vec<T>> {
        let width = precision.byte_width();
        let raw = self.take(
            n.checked_mul(width)
                .ok_or_else(|| self.err("value count overflows"))?,
        )?;
        Ok(match precision {
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|c| T::from_f32(f32::read_le(c)).expect("float"))
                .collect(),
            Precision::F64 => raw
                .chunks_exact(8)
                .map(|c| T::from_f64_lossy(f64::read_le(c)))
                .collect(),
        })
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
