//! smallNORB binary matrix files.
//!
//! Header: little-endian `magic`, `ndim`, then `max(ndim, 3)` extents (unused
//! trailing extents are 1), followed by the row-major payload.

use std::path::{Path, PathBuf};

use crate::data::{Image, Sample, Viewpoint};
use crate::error::{Error, Result};

pub const BYTE_MAGIC: u32 = 0x1E3D_4C55;
pub const INT_MAGIC: u32 = 0x1E3D_4C54;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MatrixData {
    Bytes(Vec<u8>),
    Ints(Vec<i32>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matrix {
    /// The first `ndim` extents.
    pub dims: Vec<usize>,
    pub data: MatrixData,
}

fn le_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn parse_matrix(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let truncated = |expected: usize| Error::TruncatedFile {
        path: path.to_path_buf(),
        expected: expected as u64,
        actual: bytes.len() as u64,
    };
    if bytes.len() < 8 {
        return Err(truncated(8));
    }
    let magic = le_u32(bytes, 0);
    let elem = match magic {
        BYTE_MAGIC => 1,
        INT_MAGIC => 4,
        found => {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found,
                expected: vec![BYTE_MAGIC, INT_MAGIC],
            })
        }
    };
    let ndim = le_u32(bytes, 4) as usize;
    if ndim == 0 || ndim > 8 {
        return Err(Error::DimensionMismatch(format!("{}: ndim {ndim}", path.display())));
    }
    let stored = ndim.max(3);
    let header = 8 + 4 * stored;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let dims: Vec<usize> = (0..ndim).map(|d| le_u32(bytes, 8 + 4 * d) as usize).collect();
    let expected = header + dims.iter().product::<usize>() * elem;
    if bytes.len() != expected {
        return Err(if bytes.len() < expected {
            truncated(expected)
        } else {
            Error::DimensionMismatch(format!(
                "{}: {} trailing bytes after a {dims:?} payload",
                path.display(),
                bytes.len() - expected
            ))
        });
    }
    let payload = &bytes[header..];
    let data = if elem == 1 {
        MatrixData::Bytes(payload.to_vec())
    } else {
        MatrixData::Ints(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        )
    };
    Ok(Matrix { dims, data })
}

pub fn write_matrix(m: &Matrix) -> Vec<u8> {
    let magic = match m.data {
        MatrixData::Bytes(_) => BYTE_MAGIC,
        MatrixData::Ints(_) => INT_MAGIC,
    };
    let mut out = magic.to_le_bytes().to_vec();
    out.extend_from_slice(&(m.dims.len() as u32).to_le_bytes());
    for d in 0..m.dims.len().max(3) {
        out.extend_from_slice(&(m.dims.get(d).copied().unwrap_or(1) as u32).to_le_bytes());
    }
    match &m.data {
        MatrixData::Bytes(b) => out.extend_from_slice(b),
        MatrixData::Ints(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

pub fn load_matrix(path: &Path) -> Result<Matrix> {
    if !path.is_file() {
        return Err(Error::MissingCompanion(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_matrix(&bytes, path)
}

/// Loads stereo pairs as 2-channel samples with their category and viewpoint.
pub fn load_smallnorb(dat: impl Into<PathBuf>, cat: impl Into<PathBuf>, info: impl Into<PathBuf>) -> Result<Vec<Sample>> {
    let (dat, cat, info) = (dat.into(), cat.into(), info.into());
    for p in [&dat, &cat, &info] {
        if !p.is_file() {
            return Err(Error::MissingCompanion(p.clone()));
        }
    }
    assemble(&load_matrix(&dat)?, &load_matrix(&cat)?, &load_matrix(&info)?)
}

/// Joins parsed `dat` `[n, 2, h, w]` bytes, `cat` `[n]` and `info` `[n, 4]`
/// integer matrices.
pub fn assemble(dat: &Matrix, cat: &Matrix, info: &Matrix) -> Result<Vec<Sample>> {
    let mismatch = |what: String| Error::DimensionMismatch(what);
    let (MatrixData::Bytes(pixels), [n, 2, h, w]) = (&dat.data, dat.dims.as_slice()) else {
        return Err(mismatch(format!("image matrix must be bytes [n, 2, h, w], got {:?}", dat.dims)));
    };
    let MatrixData::Ints(labels) = &cat.data else {
        return Err(mismatch("category matrix must hold 32-bit integers".into()));
    };
    let MatrixData::Ints(meta) = &info.data else {
        return Err(mismatch("info matrix must hold 32-bit integers".into()));
    };
    if cat.dims != [*n] {
        return Err(mismatch(format!("{n} image pairs but category extents {:?}", cat.dims)));
    }
    if info.dims != [*n, 4] {
        return Err(mismatch(format!("{n} image pairs but info extents {:?}", info.dims)));
    }
    let size = 2 * h * w;
    let byte = |v: i32, what: &str, limit: i32| -> Result<u8> {
        if (0..limit).contains(&v) {
            Ok(v as u8)
        } else {
            Err(mismatch(format!("{what} {v} out of range")))
        }
    };
    (0..*n)
        .map(|i| {
            let m = &meta[4 * i..4 * i + 4];
            Ok(Sample {
                image: Image::new(2, *h, *w, pixels[i * size..(i + 1) * size].to_vec())?,
                label: byte(labels[i], "category", 5)? as usize,
                meta: Some(Viewpoint {
                    instance: byte(m[0], "instance", 10)?,
                    elevation: byte(m[1], "elevation", 9)?,
                    azimuth: byte(m[2], "azimuth", 36)?,
                    lighting: byte(m[3], "lighting", 6)?,
                }),
            })
        })
        .collect()
}
