//! Spread loss, its margin schedule and the argmax readout.

use crate::autodiff::elementwise::sigmoid;
use crate::autodiff::tape::{Backward, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MARGIN_CEILING: f64 = 0.9;

/// `L = Σ_{i≠t} max(0, m − (a_t − a_i))²` for one sample.
pub fn spread_loss<T: Real>(acts: &[T], target: usize, margin: f64) -> Result<T> {
    if target >= acts.len() {
        return Err(Error::BadTarget {
            target,
            classes: acts.len(),
        });
    }
    let m = T::from_f64(margin);
    let at = acts[target];
    Ok(acts
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target)
        .map(|(_, &a)| {
            let h = (m - (at - a)).max(T::zero());
            h * h
        })
        .sum())
}

struct SpreadLossOp {
    targets: Vec<usize>,
    margin: f64,
}

impl<T: Real> Backward<T> for SpreadLossOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let acts = inputs[0];
        let (b, c) = (acts.shape()[0], acts.shape()[1]);
        let m = T::from_f64(self.margin);
        let k = grad.item() * T::c(2.0) / T::from_f64(b as f64);
        let mut g = vec![T::zero(); acts.len()];
        for (s, &t) in self.targets.iter().enumerate() {
            let row = &acts.data()[s * c..(s + 1) * c];
            for i in (0..c).filter(|&i| i != t) {
                let h = m - (row[t] - row[i]);
                if h > T::zero() {
                    g[s * c + i] += k * h;
                    g[s * c + t] -= k * h;
                }
            }
        }
        Ok(vec![Some(Tensor::new(acts.shape(), g)?)])
    }
}

/// Mean spread loss over a batch of class activations `[b, C]`.
pub fn spread_loss_batch<'t, T: Real>(acts: Var<'t, T>, targets: &[usize], margin: f64) -> Result<Var<'t, T>> {
    let s = acts.shape();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::shape("spread_loss", &[&s, &[targets.len()]]));
    }
    let value = acts.value();
    let mut total = T::zero();
    for (row, &t) in value.data().chunks(s[1]).zip(targets) {
        total += spread_loss(row, t, margin)?;
    }
    let mean = total / T::from_f64(s[0] as f64);
    let op = SpreadLossOp {
        targets: targets.to_vec(),
        margin,
    };
    Ok(acts.tape().push(Tensor::scalar(mean), &[acts], op))
}

/// `m = 0.2 + 0.79 · sigmoid(min(10, step / 50000 − 4))`, optionally capped
/// at 0.9.
pub fn margin_schedule(step: u64, clamp: bool) -> f64 {
    let x = (step as f64 / 50_000.0 - 4.0).min(10.0);
    let m = 0.2 + 0.79 * sigmoid(x);
    if clamp {
        m.min(MARGIN_CEILING)
    } else {
        m
    }
}

/// Index of the largest activation; ties go to the lowest index.
pub fn predict<T: Real>(acts: &[T]) -> usize {
    let mut best = 0;
    for (i, &a) in acts.iter().enumerate().skip(1) {
        if a > acts[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        assert_eq!(spread_loss(&[1.0, 0.0, 0.0, 0.0, 0.0], 0, 0.9).unwrap(), 0.0);
        let l: f64 = spread_loss(&[0.5, 0.2, 0.3], 0, 0.5).unwrap();
        assert!((l - 0.13).abs() < 1e-12);
        let l = spread_loss(&[0.4f64; 10], 3, 0.2).unwrap();
        assert!((l - 0.36).abs() < 1e-12);
    }

    #[test]
    fn bad_target() {
        assert!(matches!(
            spread_loss(&[0.1, 0.2], 2, 0.5),
            Err(Error::BadTarget { target: 2, classes: 2 })
        ));
    }

    #[test]
    fn schedule_values() {
        assert!((margin_schedule(0, true) - 0.214_209).abs() < 1e-5);
        assert!((margin_schedule(200_000, true) - 0.595).abs() < 1e-12);
        assert_eq!(margin_schedule(10_000_000, true), 0.9);
        assert!(margin_schedule(10_000_000, false) > 0.98);
    }

    #[test]
    fn argmax_ties() {
        assert_eq!(predict(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(predict(&[0.5, 0.5]), 0);
        assert_eq!(predict(&[0.2f32; 7]), 0);
    }
}
