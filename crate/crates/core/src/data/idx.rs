//! Big-endian IDX containers (MNIST, Fashion-MNIST).

use std::path::Path;

use crate::data::{Image, Sample};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdxArray {
    /// `count` images of `rows x cols` bytes.
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        pixels: Vec<u8>,
    },
    Labels(Vec<u8>),
}

impl IdxArray {
    pub fn len(&self) -> usize {
        match self {
            IdxArray::Images { count, .. } => *count,
            IdxArray::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Images as `[n, rows, cols]` in `[0, 1]`, labels as `[n]` class indices.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        match self {
            IdxArray::Images {
                count,
                rows,
                cols,
                pixels,
            } => Tensor::new(
                &[*count, *rows, *cols],
                pixels.iter().map(|&b| T::from_f64(b as f64 / 255.0)).collect(),
            )
            .expect("extent checked on parse"),
            IdxArray::Labels(l) => {
                Tensor::new(&[l.len()], l.iter().map(|&b| T::from_f64(b as f64)).collect()).expect("1-d")
            }
        }
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses an IDX byte buffer; `path` only labels errors.
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    let truncated = |expected: usize| Error::TruncatedFile {
        path: path.to_path_buf(),
        expected: expected as u64,
        actual: bytes.len() as u64,
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    let magic = be_u32(bytes, 0);
    let ndim = match magic {
        IMAGES_MAGIC => 3,
        LABELS_MAGIC => 1,
        found => {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found,
                expected: vec![IMAGES_MAGIC, LABELS_MAGIC],
            })
        }
    };
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let dims: Vec<usize> = (0..ndim).map(|d| be_u32(bytes, 4 + 4 * d) as usize).collect();
    let payload: usize = dims.iter().product();
    let expected = header + payload;
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    if bytes.len() > expected {
        return Err(Error::DimensionMismatch(format!(
            "{}: {} trailing bytes after a {dims:?} payload",
            path.display(),
            bytes.len() - expected
        )));
    }
    let data = bytes[header..].to_vec();
    Ok(if ndim == 3 {
        IdxArray::Images {
            count: dims[0],
            rows: dims[1],
            cols: dims[2],
            pixels: data,
        }
    } else {
        IdxArray::Labels(data)
    })
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_idx(&bytes, path)
}

/// Serializes back to the IDX byte layout.
pub fn write_idx(array: &IdxArray) -> Vec<u8> {
    let (magic, dims, data): (u32, Vec<usize>, &[u8]) = match array {
        IdxArray::Images {
            count,
            rows,
            cols,
            pixels,
        } => (IMAGES_MAGIC, vec![*count, *rows, *cols], pixels),
        IdxArray::Labels(l) => (LABELS_MAGIC, vec![l.len()], l),
    };
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + data.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Pairs an image file with its label file.
pub fn samples(images: &IdxArray, labels: &IdxArray, classes: usize) -> Result<Vec<Sample>> {
    let (IdxArray::Images {
        count,
        rows,
        cols,
        pixels,
    }, IdxArray::Labels(labels)) = (images, labels)
    else {
        return Err(Error::DimensionMismatch("expected an image file and a label file".into()));
    };
    if *count != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{count} images but {} labels",
            labels.len()
        )));
    }
    let size = rows * cols;
    pixels
        .chunks_exact(size.max(1))
        .zip(labels)
        .map(|(px, &label)| {
            if label as usize >= classes {
                return Err(Error::DimensionMismatch(format!("label {label} outside {classes} classes")));
            }
            Ok(Sample {
                image: Image::new(1, *rows, *cols, px.to_vec())?,
                label: label as usize,
                meta: None,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn image_file_shape() {
        let mut bytes = header(0x803, &[10, 28, 28]);
        bytes.extend((0..7840).map(|i| (i % 256) as u8));
        let a = parse_idx(&bytes, Path::new("x")).unwrap();
        let t = a.to_tensor::<f64>();
        assert_eq!(t.shape(), &[10, 28, 28]);
        assert_eq!(t.data()[255], 1.0);
        assert_eq!(write_idx(&a), bytes);
    }

    #[test]
    fn label_file() {
        let mut bytes = header(0x801, &[10]);
        bytes.extend(0..10u8);
        assert_eq!(parse_idx(&bytes, Path::new("x")).unwrap(), IdxArray::Labels((0..10).collect()));
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = header(0x803, &[10, 28, 28]);
        bytes.extend(vec![0u8; 7000]);
        match parse_idx(&bytes, Path::new("x")) {
            Err(Error::TruncatedFile { expected, actual, .. }) => {
                assert_eq!(expected, 16 + 7840);
                assert_eq!(actual, 16 + 7000);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_magic() {
        let bytes = header(0x802, &[1]);
        assert!(matches!(
            parse_idx(&bytes, Path::new("x")),
            Err(Error::BadMagic { found: 0x802, .. })
        ));
    }
}
