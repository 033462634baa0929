//! Binary tensor checkpoint container.
//!
//! Layout: magic bytes `KSAC`, format version `u32`, tensor count `u32`, then
//! per tensor: name length `u32` + UTF-8 name, shape as 4×`u64`, payload as
//! little-endian `f64`. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Shape};

pub const MAGIC: &[u8; 4] = b"KSAC";
pub const FORMAT_VERSION: u32 = 1;

/// One named tensor inside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<Real>,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save(path: &Path, entries: &[TensorEntry]) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut go = || -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(entries.len() as u32).to_le_bytes())?;
        for entry in entries {
            let name = entry.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            for &d in &entry.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &entry.data {
                w.write_all(&(v as f64).to_le_bytes())?;
            }
        }
        w.flush()
    };
    go().map_err(|e| io_err(path, e))
}

pub fn load(path: &Path) -> Result<Vec<TensorEntry>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    load_reader(&mut r).map_err(|e| match e {
        Error::Io { source, .. } => io_err(path, source),
        other => other,
    })
}

fn load_reader<R: Read>(r: &mut R) -> Result<Vec<TensorEntry>> {
    fn bytes<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        r.read_exact(&mut buf).map_err(|e| Error::Io {
            path: Default::default(),
            source: e,
        })?;
        Ok(buf)
    }
    let magic = bytes::<_, 4>(r)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = u32::from_le_bytes(bytes(r)?);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let count = u32::from_le_bytes(bytes(r)?);
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(bytes(r)?) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(|e| Error::Io {
            path: Default::default(),
            source: e,
        })?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = u64::from_le_bytes(bytes(r)?) as usize;
        }
        let n = numel(shape);
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(bytes(r)?) as Real);
        }
        entries.push(TensorEntry { name, shape, data });
    }
    Ok(entries)
}
