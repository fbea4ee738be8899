//! Binary record container shared by checkpoints, embedding tables and
//! backend models.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes
//! version    u32
//! header     u32 length + UTF-8 bytes (free-form, usually JSON)
//! count      u32
//! records    count × { u32 name length, name bytes,
//!                      u32 rank, rank × u64 dims,
//!                      Π dims × f64 values }
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const RECORD_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Record {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordFile {
    pub magic: [u8; 4],
    pub header: String,
    pub records: Vec<Record>,
}

impl RecordFile {
    pub fn new(magic: [u8; 4], header: String) -> Self {
        Self {
            magic,
            header,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: Record) {
        self.records.push(record);
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&RECORD_VERSION.to_le_bytes());
        put_str(&mut out, &self.header);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            put_str(&mut out, &r.name);
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses `bytes`; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], expected_magic: [u8; 4], path: &Path) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0, path };
        let magic: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
        if magic != expected_magic {
            return Err(Error::format(
                path,
                format!(
                    "expected magic {:?}, found {:?}",
                    String::from_utf8_lossy(&expected_magic),
                    String::from_utf8_lossy(&magic)
                ),
            ));
        }
        let version = cur.u32()?;
        if version != RECORD_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let header = cur.string()?;
        let count = cur.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = cur.string()?;
            let rank = cur.u32()? as usize;
            let shape = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format(path, "record shape overflows"))?;
            let raw = cur.take(len.checked_mul(8).ok_or_else(|| Error::format(path, "record too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            records.push(Record { name, shape, data });
        }
        if cur.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last record"));
        }
        Ok(Self {
            magic,
            header,
            records,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path, expected_magic: [u8; 4]) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected_magic, path)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "truncated payload"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(self.path, "string is not UTF-8"))
    }
}

/// Writes to a sibling temporary file and renames it over `path`, so a
/// failed write never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MAGIC: [u8; 4] = *b"TEST";

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            header in ".{0,20}",
            data in proptest::collection::vec(proptest::num::f64::ANY, 0..24),
        ) {
            let mut f = RecordFile::new(MAGIC, header);
            f.push(Record::new("a.weight", vec![data.len()], data.clone()));
            f.push(Record::new("empty", vec![0, 3], vec![]));
            let bytes = f.to_bytes();
            let back = RecordFile::from_bytes(&bytes, MAGIC, Path::new("mem")).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back.records.len(), 2);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut f = RecordFile::new(MAGIC, "{}".into());
        f.push(Record::new("x", vec![2], vec![1.0, 2.0]));
        let bytes = f.to_bytes();
        assert!(RecordFile::from_bytes(&bytes, *b"NOPE", Path::new("m")).is_err());
        assert!(RecordFile::from_bytes(&bytes[..bytes.len() - 3], MAGIC, Path::new("m")).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(RecordFile::from_bytes(&extra, MAGIC, Path::new("m")).is_err());
    }
}
