//! `QCN1` checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! "QCN1"  u32 version  u64 step
//! u32 len, config text (UTF-8)
//! u32 channels, f64 mean[channels], f64 std[channels]
//! u32 arrays, then per array:
//!   u32 len, name (UTF-8)  u8 group  u8 dtype (1 = f32, 2 = f64)
//!   u8 ndim  u64 extents[ndim]  payload
//! ```
//!
//! Group 0 holds trainable parameters, 1 normalization buffers and 2
//! optimizer moments (`adam.m.*`, `adam.v.*`, `sgd.v.*`).

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::params::ParamStore;
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::real::{DType, Real};
use crate::tensor::{numel, Tensor};
use crate::train::optimizer::Optimizer;

pub const MAGIC: &[u8; 4] = b"QCN1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrayGroup {
    Parameter,
    Buffer,
    Optimizer,
}

impl ArrayGroup {
    fn code(self) -> u8 {
        match self {
            ArrayGroup::Parameter => 0,
            ArrayGroup::Buffer => 1,
            ArrayGroup::Optimizer => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ArrayGroup::Parameter),
            1 => Some(ArrayGroup::Buffer),
            2 => Some(ArrayGroup::Optimizer),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Values {
    pub fn dtype(&self) -> DType {
        match self {
            Values::F32(_) => DType::F32,
            Values::F64(_) => DType::F64,
        }
    }

    fn len(&self) -> usize {
        match self {
            Values::F32(v) => v.len(),
            Values::F64(v) => v.len(),
        }
    }

    fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => Values::F32(t.data().iter().map(|x| x.as_f64() as f32).collect()),
            DType::F64 => Values::F64(t.data().iter().map(|x| x.as_f64()).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub group: ArrayGroup,
    pub shape: Vec<usize>,
    pub values: Values,
}

impl NamedArray {
    fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match (&self.values, T::DTYPE) {
            (Values::F32(v), DType::F32) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            (Values::F64(v), DType::F64) => v.iter().map(|&x| T::from_f64(x)).collect(),
            (v, want) => {
                return Err(Error::CheckpointMismatch(format!(
                    "`{}` is stored as {} but {} was requested",
                    self.name,
                    v.dtype().name(),
                    want.name()
                )))
            }
        };
        Tensor::new(&self.shape, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub config: String,
    pub normalization: Normalization,
    pub arrays: Vec<NamedArray>,
}

/// Model and optimizer state restored from a checkpoint.
pub struct Restored<T> {
    pub store: ParamStore<T>,
    pub optimizer_state: BTreeMap<String, Tensor<T>>,
}

impl Checkpoint {
    pub fn capture<T: Real>(
        step: u64,
        config: &str,
        normalization: &Normalization,
        store: &ParamStore<T>,
        optimizer: Option<&Optimizer<T>>,
    ) -> Self {
        let mut arrays: Vec<NamedArray> = store
            .iter()
            .map(|(name, p)| NamedArray {
                name: name.clone(),
                group: if p.trainable {
                    ArrayGroup::Parameter
                } else {
                    ArrayGroup::Buffer
                },
                shape: p.value.shape().to_vec(),
                values: Values::from_tensor(&p.value),
            })
            .collect();
        if let Some(opt) = optimizer {
            arrays.extend(opt.state.iter().map(|(name, t)| NamedArray {
                name: name.clone(),
                group: ArrayGroup::Optimizer,
                shape: t.shape().to_vec(),
                values: Values::from_tensor(t),
            }));
        }
        Checkpoint {
            version: VERSION,
            step,
            config: config.to_string(),
            normalization: normalization.clone(),
            arrays,
        }
    }

    pub fn dtype(&self) -> Option<DType> {
        self.arrays.first().map(|a| a.values.dtype())
    }

    /// Rebuilds the parameters of `arch`; names, shapes and groups must match
    /// its definition exactly.
    pub fn restore<T: Real>(&self, arch: &Architecture) -> Result<Restored<T>> {
        let specs = arch.param_specs();
        let params: BTreeMap<&str, &NamedArray> = self
            .arrays
            .iter()
            .filter(|a| a.group != ArrayGroup::Optimizer)
            .map(|a| (a.name.as_str(), a))
            .collect();
        if params.len() != specs.len() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint holds {} parameter arrays, the model defines {}",
                params.len(),
                specs.len()
            )));
        }
        let mut store = ParamStore::new();
        for spec in specs {
            let a = params
                .get(spec.name.as_str())
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter `{}`", spec.name)))?;
            if a.shape != spec.shape {
                return Err(Error::CheckpointMismatch(format!(
                    "`{}` has shape {:?}, the model expects {:?}",
                    spec.name, a.shape, spec.shape
                )));
            }
            if (a.group == ArrayGroup::Parameter) != spec.trainable {
                return Err(Error::CheckpointMismatch(format!("`{}` is stored in the wrong group", spec.name)));
            }
            store.insert(spec.name, a.to_tensor()?, spec.trainable)?;
        }
        let mut optimizer_state = BTreeMap::new();
        for a in self.arrays.iter().filter(|a| a.group == ArrayGroup::Optimizer) {
            optimizer_state.insert(a.name.clone(), a.to_tensor()?);
        }
        Ok(Restored { store, optimizer_state })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.normalization.channels() as u32).to_le_bytes());
        for v in self.normalization.mean.iter().chain(&self.normalization.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(a.group.code());
            out.push(a.values.dtype().code());
            out.push(a.shape.len() as u8);
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &a.values {
                Values::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                Values::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::BadCheckpoint("missing QCN1 magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::BadCheckpoint(format!("unsupported version {version}")));
        }
        let step = r.u64()?;
        let config = r.string()?;
        let channels = r.u32()? as usize;
        let mut stats = Vec::with_capacity(2 * channels);
        for _ in 0..2 * channels {
            stats.push(f64::read_le(r.take(8)?));
        }
        let std = stats.split_off(channels);
        let normalization = Normalization { mean: stats, std };
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let group = ArrayGroup::from_code(r.u8()?)
                .ok_or_else(|| Error::BadCheckpoint(format!("`{name}`: unknown group code")))?;
            let dtype = DType::from_code(r.u8()?)
                .ok_or_else(|| Error::BadCheckpoint(format!("`{name}`: unknown dtype code")))?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = numel(&shape);
            let payload = r.take(n.checked_mul(dtype.size()).ok_or_else(|| Error::BadCheckpoint("extent overflow".into()))?)?;
            let values = match dtype {
                DType::F32 => Values::F32(payload.chunks_exact(4).map(f32::read_le).collect()),
                DType::F64 => Values::F64(payload.chunks_exact(8).map(f64::read_le).collect()),
            };
            debug_assert_eq!(values.len(), n);
            arrays.push(NamedArray {
                name,
                group,
                shape,
                values,
            });
        }
        if r.at != bytes.len() {
            return Err(Error::BadCheckpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Checkpoint {
            version,
            step,
            config,
            normalization,
            arrays,
        })
    }

    /// Writes through a temporary file so an interrupted save never leaves a
    /// partial checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::BadCheckpoint(format!("truncated at byte {} (needed {n} more)", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::BadCheckpoint("name is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let arch = Architecture::miniature();
        let store = arch.init_parameters::<f64>(3).unwrap();
        let norm = Normalization {
            mean: vec![0.25],
            std: vec![1.5],
        };
        let ck = Checkpoint::capture(17, "seed = 3\n", &norm, &store, None);
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let back = ck.restore::<f64>(&arch).unwrap().store;
        assert_eq!(back, store);
    }

    #[test]
    fn mismatch_is_reported() {
        let arch = Architecture::miniature();
        let store = arch.init_parameters::<f32>(3).unwrap();
        let ck = Checkpoint::capture(0, "", &Normalization::identity(1), &store, None);
        let other = Architecture {
            primary_types: 5,
            ..Architecture::miniature()
        };
        assert!(matches!(ck.restore::<f32>(&other), Err(Error::CheckpointMismatch(_))));
        assert!(matches!(ck.restore::<f64>(&arch), Err(Error::CheckpointMismatch(_))));
    }
}
