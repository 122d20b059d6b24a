//! Dataset containers, parsers, preprocessing and the viewpoint split harness.
//!
//! Expected layout below `--data-dir`:
//!
//! | dataset         | files                                                                     |
//! |-----------------|---------------------------------------------------------------------------|
//! | `mnist`         | `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`, `t10k-*` likewise   |
//! | `fashion-mnist` | same names as `mnist`                                                     |
//! | `smallnorb`     | `smallnorb-5x46789x9x18x6x2x96x96-training-{dat,cat,info}.mat`, `smallnorb-5x01235x9x18x6x2x96x96-testing-*` |
//! | `cifar10`       | `data_batch_{1..5}.bin`, `test_batch.bin`                                 |
//! | `svhn`          | `train.bin`, `test.bin` (CIFAR-10 binary record layout)                   |
//! | `synthetic`     | nothing; generated in memory                                              |

pub mod cifar;
pub mod idx;
pub mod preprocess;
pub mod smallnorb;
pub mod split;
pub mod synthetic;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

pub use preprocess::{preprocess, Normalization, Phase, INPUT_SIZE};
pub use split::{viewpoint_split, SplitMode, SplitSpec, ViewpointSplit};

/// Image stored as bytes in `[channels, height, width]` order; pixel value
/// `b` stands for `b / 255`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != channels * height * width {
            return Err(Error::DimensionMismatch(format!(
                "image {channels}x{height}x{width} needs {} bytes, got {}",
                channels * height * width,
                pixels.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            pixels,
        })
    }

    /// Pixels scaled to `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f32> {
        self.pixels.iter().map(|&b| b as f32 / 255.0).collect()
    }
}

/// Viewpoint record of a smallNORB-style sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Viewpoint {
    pub instance: u8,
    /// Index 0..9, standing for 30 + 5·index degrees.
    pub elevation: u8,
    /// Even code 0..=34, standing for 10·code degrees.
    pub azimuth: u8,
    pub lighting: u8,
}

impl Viewpoint {
    pub fn elevation_degrees(&self) -> u32 {
        30 + 5 * self.elevation as u32
    }

    pub fn azimuth_degrees(&self) -> u32 {
        10 * self.azimuth as u32
    }

    pub fn is_valid(&self) -> bool {
        self.elevation < 9 && self.azimuth % 2 == 0 && self.azimuth < 36
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    pub meta: Option<Viewpoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    SmallNorb,
    Cifar10,
    Svhn,
    Synthetic,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 6] = [
        DatasetKind::Mnist,
        DatasetKind::FashionMnist,
        DatasetKind::SmallNorb,
        DatasetKind::Cifar10,
        DatasetKind::Svhn,
        DatasetKind::Synthetic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion-mnist",
            DatasetKind::SmallNorb => "smallnorb",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Svhn => "svhn",
            DatasetKind::Synthetic => "synthetic",
        }
    }

    pub fn classes(self) -> usize {
        match self {
            DatasetKind::SmallNorb => 5,
            DatasetKind::Synthetic => synthetic::CLASSES,
            _ => 10,
        }
    }

    /// Channels of the network input.
    pub fn channels(self) -> usize {
        match self {
            DatasetKind::SmallNorb => 2,
            DatasetKind::Cifar10 | DatasetKind::Svhn => 3,
            _ => 1,
        }
    }

    pub fn has_viewpoints(self) -> bool {
        matches!(self, DatasetKind::SmallNorb | DatasetKind::Synthetic)
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let alias = match s.as_str() {
            "fashion" | "fashionmnist" | "fashion_mnist" => "fashion-mnist",
            "norb" | "small-norb" | "small_norb" => "smallnorb",
            "cifar" | "cifar-10" => "cifar10",
            other => other,
        };
        DatasetKind::ALL
            .into_iter()
            .find(|k| k.name() == alias)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown dataset `{s}`")))
    }
}

/// Train and test splits of one dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Sizes of the generated synthetic splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSizes {
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SyntheticSizes {
    fn default() -> Self {
        SyntheticSizes {
            train: 540,
            test: 270,
            seed: 0,
        }
    }
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::DatasetMissing(path.display().to_string()))
    }
}

fn idx_split(dir: &Path, prefix: &str, classes: usize) -> Result<Vec<Sample>> {
    let images = idx::load_idx(require(dir.join(format!("{prefix}-images-idx3-ubyte")))?)?;
    let labels = idx::load_idx(require(dir.join(format!("{prefix}-labels-idx1-ubyte")))?)?;
    idx::samples(&images, &labels, classes)
}

impl Dataset {
    /// Loads `kind` from `dir`. The synthetic set is generated from `synthetic`.
    pub fn load(kind: DatasetKind, dir: &Path, synthetic: SyntheticSizes) -> Result<Self> {
        let (train, test) = match kind {
            DatasetKind::Mnist | DatasetKind::FashionMnist => {
                (idx_split(dir, "train", kind.classes())?, idx_split(dir, "t10k", kind.classes())?)
            }
            DatasetKind::SmallNorb => {
                let files = |stem: &str| -> [PathBuf; 3] {
                    ["dat", "cat", "info"].map(|part| dir.join(format!("{stem}-{part}.mat")))
                };
                let [dat, cat, info] = files("smallnorb-5x46789x9x18x6x2x96x96-training");
                let train = smallnorb::load_smallnorb(require(dat)?, cat, info)?;
                let [dat, cat, info] = files("smallnorb-5x01235x9x18x6x2x96x96-testing");
                (train, smallnorb::load_smallnorb(require(dat)?, cat, info)?)
            }
            DatasetKind::Cifar10 => {
                let mut train = Vec::new();
                for i in 1..=5 {
                    train.extend(cifar::load_records(require(dir.join(format!("data_batch_{i}.bin")))?)?);
                }
                (train, cifar::load_records(require(dir.join("test_batch.bin"))?)?)
            }
            DatasetKind::Svhn => (
                cifar::load_records(require(dir.join("train.bin"))?)?,
                cifar::load_records(require(dir.join("test.bin"))?)?,
            ),
            DatasetKind::Synthetic => (
                synthetic::synthetic_dataset(synthetic.train, synthetic.seed)?,
                synthetic::synthetic_dataset(synthetic.test, synthetic.seed.wrapping_add(0x5eed))?,
            ),
        };
        let data = Dataset { kind, train, test };
        data.verify()?;
        Ok(data)
    }

    /// Checks label ranges and viewpoint codes.
    pub fn verify(&self) -> Result<()> {
        let classes = self.kind.classes();
        for (split, samples) in [("train", &self.train), ("test", &self.test)] {
            for (i, s) in samples.iter().enumerate() {
                if s.label >= classes {
                    return Err(Error::DimensionMismatch(format!(
                        "{split} sample {i} has label {} but {} has {classes} classes",
                        s.label, self.kind
                    )));
                }
                if let Some(v) = s.meta {
                    if !v.is_valid() {
                        return Err(Error::DimensionMismatch(format!(
                            "{split} sample {i} has invalid viewpoint {v:?}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Keeps the first `train` / `test` samples; 0 keeps everything.
    pub fn truncate(&mut self, train: usize, test: usize) {
        if train > 0 {
            self.train.truncate(train);
        }
        if test > 0 {
            self.test.truncate(test);
        }
    }
}

/// Samples per class.
pub fn label_histogram(samples: &[Sample], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for s in samples {
        if s.label < classes {
            counts[s.label] += 1;
        }
    }
    counts
}
