//! Novel-viewpoint splits: train on a third of the viewpoints of the
//! original training split, test on the others.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::data::{Sample, Viewpoint};
use crate::error::{Error, Result};

/// Training azimuth codes of the novel-azimuth split (300°…40°).
pub const NOVEL_AZIMUTH_TRAIN: [u8; 6] = [30, 32, 34, 0, 2, 4];
/// Training elevation indices of the novel-elevation split (30°, 35°, 40°).
pub const NOVEL_ELEVATION_TRAIN: [u8; 3] = [0, 1, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitMode {
    Standard,
    NovelAzimuth,
    NovelElevation,
}

impl SplitMode {
    pub fn name(self) -> &'static str {
        match self {
            SplitMode::Standard => "standard",
            SplitMode::NovelAzimuth => "novel-azimuth",
            SplitMode::NovelElevation => "novel-elevation",
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "standard" => Ok(SplitMode::Standard),
            "novel-azimuth" => Ok(SplitMode::NovelAzimuth),
            "novel-elevation" => Ok(SplitMode::NovelElevation),
            other => Err(Error::ConfigInvalid(format!(
                "unknown split `{other}` (expected standard, novel-azimuth or novel-elevation)"
            ))),
        }
    }
}

/// Viewpoint sets of one split; values are azimuth codes or elevation
/// indices depending on the mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub train_views: BTreeSet<u8>,
    pub test_views: BTreeSet<u8>,
}

impl SplitSpec {
    pub fn new(mode: SplitMode) -> Self {
        let (train, all): (BTreeSet<u8>, BTreeSet<u8>) = match mode {
            SplitMode::Standard => (BTreeSet::new(), BTreeSet::new()),
            SplitMode::NovelAzimuth => (NOVEL_AZIMUTH_TRAIN.into(), (0..18).map(|k| 2 * k).collect()),
            SplitMode::NovelElevation => (NOVEL_ELEVATION_TRAIN.into(), (0..9).collect()),
        };
        let test_views = all.difference(&train).copied().collect();
        SplitSpec {
            mode,
            train_views: train,
            test_views,
        }
    }

    /// The coordinate this split partitions on.
    pub fn view_of(&self, v: &Viewpoint) -> Option<u8> {
        match self.mode {
            SplitMode::Standard => None,
            SplitMode::NovelAzimuth => Some(v.azimuth),
            SplitMode::NovelElevation => Some(v.elevation),
        }
    }
}

/// Indices into the original train and test splits.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ViewpointSplit {
    pub train: Vec<usize>,
    /// Test samples at held-out viewpoints (all test samples in standard mode).
    pub novel: Vec<usize>,
    /// Test samples at training viewpoints (empty in standard mode).
    pub familiar: Vec<usize>,
}

pub fn viewpoint_split(train: &[Sample], test: &[Sample], spec: &SplitSpec) -> Result<ViewpointSplit> {
    if spec.mode == SplitMode::Standard {
        return Ok(ViewpointSplit {
            train: (0..train.len()).collect(),
            novel: (0..test.len()).collect(),
            familiar: Vec::new(),
        });
    }
    let view = |samples: &[Sample], offset: usize| -> Result<Vec<u8>> {
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.meta
                    .as_ref()
                    .and_then(|m| spec.view_of(m))
                    .ok_or(Error::MissingMeta { index: offset + i })
            })
            .collect()
    };
    let train_v = view(train, 0)?;
    let test_v = view(test, train.len())?;
    let mut out = ViewpointSplit::default();
    out.train = (0..train.len()).filter(|&i| spec.train_views.contains(&train_v[i])).collect();
    for (i, v) in test_v.iter().enumerate() {
        if spec.train_views.contains(v) {
            out.familiar.push(i);
        } else if spec.test_views.contains(v) {
            out.novel.push(i);
        }
    }
    Ok(out)
}
