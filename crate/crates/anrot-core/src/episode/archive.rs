//! Dataset tensor-archive I/O.
//!
//! Layout: magic `ANRT`, format version u32, record count u32, then per
//! record a label u32, dims C/H/W u32, and the pixels as IEEE-754
//! single-precision little-endian in row-major (C, H, W) order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Dataset, Split};

const MAGIC: &[u8; 4] = b"ANRT";
const VERSION: u32 = 1;

/// Writes the dataset. Pixels are stored single-precision, so values
/// round-trip through `f32`.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&u32::try_from(ds.len()).map_err(|_| {
        Error::contract(format!("dataset has {} records, format caps at u32", ds.len()))
    })?.to_le_bytes());
    for i in 0..ds.len() {
        let img = ds.image(i);
        let label = u32::try_from(ds.label(i))
            .map_err(|_| Error::contract(format!("label {} exceeds u32", ds.label(i))))?;
        bytes.extend_from_slice(&label.to_le_bytes());
        for &d in img.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::contract(format!("dimension {d} exceeds u32")))?;
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        for &v in img.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
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
            None => Err(Error::format(self.path, "archive is truncated")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Reads a dataset archive and assigns it the given meta-split role.
pub fn load_dataset(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let path_str = path.display().to_string();
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: &path_str,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::format(&path_str, "bad magic, not a dataset archive"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(
            &path_str,
            format!("unsupported archive version {version}"),
        ));
    }
    let count = r.u32()? as usize;
    if count == 0 {
        return Err(Error::format(&path_str, "archive holds no records"));
    }
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for rec in 0..count {
        let label = r.u32()? as usize;
        let c = r.u32()? as usize;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let numel = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .filter(|&v| v > 0 && v <= 1 << 28)
            .ok_or_else(|| {
                Error::format(
                    &path_str,
                    format!("record {rec} has implausible dims [{c}, {h}, {w}]"),
                )
            })?;
        let raw = r.take(numel * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        images.push(Tensor::new(vec![c, h, w], data)?);
        labels.push(label);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            &path_str,
            format!("{} trailing bytes after last record", bytes.len() - r.pos),
        ));
    }
    Dataset::new(images, labels, split)
}
