//! CIFAR-10 binary records: one label byte followed by a 3x32x32 image.
//! SVHN is read from files converted to the same record layout.

use std::path::Path;

use crate::data::{Image, Sample};
use crate::error::{Error, Result};

pub const SIDE: usize = 32;
pub const RECORD: usize = 1 + 3 * SIDE * SIDE;

pub fn parse_records(bytes: &[u8], path: &Path) -> Result<Vec<Sample>> {
    if bytes.len() % RECORD != 0 {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            expected: (bytes.len() / RECORD + 1) as u64 * RECORD as u64,
            actual: bytes.len() as u64,
        });
    }
    bytes
        .chunks_exact(RECORD)
        .map(|r| {
            if r[0] >= 10 {
                return Err(Error::DimensionMismatch(format!("{}: label {}", path.display(), r[0])));
            }
            Ok(Sample {
                image: Image::new(3, SIDE, SIDE, r[1..].to_vec())?,
                label: r[0] as usize,
                meta: None,
            })
        })
        .collect()
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_records(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records() {
        let mut bytes = vec![3u8];
        bytes.extend(vec![9u8; RECORD - 1]);
        let s = parse_records(&bytes, Path::new("b")).unwrap();
        assert_eq!((s.len(), s[0].label, s[0].image.channels), (1, 3, 3));
        bytes.pop();
        assert!(matches!(parse_records(&bytes, Path::new("b")), Err(Error::TruncatedFile { .. })));
    }
}
