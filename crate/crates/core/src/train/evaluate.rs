//! Batch assembly and accuracy evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::params::ParamStore;
use crate::autodiff::tape::Tape;
use crate::data::{preprocess, DatasetKind, Normalization, Phase, Sample, INPUT_SIZE};
use crate::error::Result;
use crate::model::Architecture;
use crate::nn::Ctx;
use crate::objective::{predict, spread_loss};
use crate::real::Real;
use crate::tensor::Tensor;

/// Augmentation stream of one sample at one optimizer step.
pub fn sample_rng(seed: u64, step: u64, index: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&step.to_le_bytes());
    key[16..24].copy_from_slice(&(index as u64).to_le_bytes());
    key[24..].copy_from_slice(b"augment\0");
    ChaCha8Rng::from_seed(key)
}

/// How raw samples become network inputs.
#[derive(Debug, Clone)]
pub struct InputPipeline {
    pub kind: DatasetKind,
    pub normalization: Normalization,
    pub augment_fashion: bool,
    pub seed: u64,
}

impl InputPipeline {
    /// Images `[b, c, 32, 32]` and labels of `samples[indices]`.
    pub fn batch<T: Real>(&self, samples: &[Sample], indices: &[usize], phase: Phase, step: u64) -> Result<(Tensor<T>, Vec<usize>)> {
        let c = self.kind.channels();
        let images: Vec<Vec<f32>> = indices
            .par_iter()
            .map(|&i| {
                let mut rng = sample_rng(self.seed, step, i);
                let mut x = preprocess(&samples[i], self.kind, phase, &mut rng, self.augment_fashion);
                self.normalization.apply(&mut x);
                x
            })
            .collect();
        let data: Vec<T> = images.iter().flatten().map(|&v| T::from_f64(v as f64)).collect();
        let labels = indices.iter().map(|&i| samples[i].label).collect();
        Ok((Tensor::new(&[indices.len(), c, INPUT_SIZE, INPUT_SIZE], data)?, labels))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub samples: usize,
    pub accuracy: f64,
    pub error_rate: f64,
    /// `None` for classes absent from the evaluated set.
    pub per_class: Vec<Option<f64>>,
    /// Mean spread loss at the margin passed to [`evaluate`].
    pub loss: f64,
}

/// Inference-mode accuracy over `samples[indices]`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<T: Real>(
    arch: &Architecture,
    store: &ParamStore<T>,
    pipeline: &InputPipeline,
    samples: &[Sample],
    indices: &[usize],
    batch_size: usize,
    margin: f64,
) -> Result<EvalMetrics> {
    let classes = arch.classes;
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    let mut loss = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, labels) = pipeline.batch::<T>(samples, chunk, Phase::Test, 0)?;
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, store, false);
        let out = arch.forward(&mut ctx, tape.constant(images))?;
        let acts = out.class_acts.value();
        for (row, &label) in acts.data().chunks(classes).zip(&labels) {
            totals[label] += 1;
            hits[label] += (predict(row) == label) as usize;
            loss += spread_loss(row, label, margin)?.as_f64();
        }
    }
    let n = indices.len();
    let correct: usize = hits.iter().sum();
    let accuracy = if n == 0 { 0.0 } else { correct as f64 / n as f64 };
    Ok(EvalMetrics {
        samples: n,
        accuracy,
        error_rate: 1.0 - accuracy,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
        loss: if n == 0 { 0.0 } else { loss / n as f64 },
    })
}
