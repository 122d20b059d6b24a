//! Per-channel batch normalization over `[b, c, ...]` inputs.

use crate::autodiff::tape::{Backward, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

/// Statistics the forward pass normalized with (biased variance).
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

struct BatchNormOp<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
    /// Statistics were computed from this batch (training mode).
    batch_stats: bool,
}

fn layout(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

impl<T: Real> Backward<T> for BatchNormOp<T> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, scale) = (inputs[0], inputs[1]);
        let (b, c, s) = layout(x.shape());
        let (xd, g, sc) = (x.data(), grad.data(), scale.data());
        let count = T::from_f64((b * s) as f64);
        let mut g_scale = vec![T::zero(); c];
        let mut g_shift = vec![T::zero(); c];
        for ch in 0..c {
            for bi in 0..b {
                let base = (bi * c + ch) * s;
                for i in 0..s {
                    let xhat = (xd[base + i] - self.mean[ch]) * self.inv_std[ch];
                    g_scale[ch] += g[base + i] * xhat;
                    g_shift[ch] += g[base + i];
                }
            }
        }
        let gx = needs[0].then(|| {
            let mut out = vec![T::zero(); x.len()];
            for ch in 0..c {
                let k = sc[ch] * self.inv_std[ch];
                let (mean_g, mean_gx) = if self.batch_stats {
                    (g_shift[ch] / count, g_scale[ch] / count)
                } else {
                    (T::zero(), T::zero())
                };
                for bi in 0..b {
                    let base = (bi * c + ch) * s;
                    for i in 0..s {
                        let xhat = (xd[base + i] - self.mean[ch]) * self.inv_std[ch];
                        out[base + i] = k * (g[base + i] - mean_g - xhat * mean_gx);
                    }
                }
            }
            Tensor::new(x.shape(), out)
        });
        Ok(vec![
            gx.transpose()?,
            Some(Tensor::new(scale.shape(), g_scale)?),
            Some(Tensor::new(inputs[2].shape(), g_shift)?),
        ])
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// Normalizes each channel with `running` statistics when given
    /// (inference), otherwise with the batch's own statistics, which are
    /// returned so the caller can update its running averages.
    pub fn batch_norm(
        self,
        scale: Var<'t, T>,
        shift: Var<'t, T>,
        running: Option<(&Tensor<T>, &Tensor<T>)>,
    ) -> Result<(Var<'t, T>, Option<BatchStats<T>>)> {
        let x = self.value();
        let shape = x.shape();
        if shape.len() < 2 || scale.shape() != [shape[1]] || shift.shape() != [shape[1]] {
            return Err(Error::shape("batch_norm", &[shape, &scale.shape(), &shift.shape()]));
        }
        let (b, c, s) = layout(shape);
        let xd = x.data();
        let eps = T::from_f64(BN_EPS);
        let (mean, var, batch_stats) = match running {
            Some((rm, rv)) => {
                if rm.shape() != [c] || rv.shape() != [c] {
                    return Err(Error::shape("batch_norm", &[shape, rm.shape(), rv.shape()]));
                }
                (rm.data().to_vec(), rv.data().to_vec(), false)
            }
            None => {
                let count = T::from_f64((b * s) as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for bi in 0..b {
                        let base = (bi * c + ch) * s;
                        acc += xd[base..base + s].iter().copied().sum::<T>();
                    }
                    mean[ch] = acc / count;
                    let mut acc = T::zero();
                    for bi in 0..b {
                        let base = (bi * c + ch) * s;
                        for &v in &xd[base..base + s] {
                            let d = v - mean[ch];
                            acc += d * d;
                        }
                    }
                    var[ch] = acc / count;
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (sc, sh) = (scale.value(), shift.value());
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * s;
                let k = sc.data()[ch] * inv_std[ch];
                let off = sh.data()[ch];
                for i in 0..s {
                    out[base + i] = (xd[base + i] - mean[ch]) * k + off;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let stats = batch_stats.then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        });
        let op = BatchNormOp {
            mean,
            inv_std,
            batch_stats,
        };
        Ok((self.tape().push(value, &[self, scale, shift], op), stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tape::Tape;

    #[test]
    fn training_output_is_standardized() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[4, 1], &[1., 2., 3., 4.]).unwrap());
        let scale = tape.constant(Tensor::ones(&[1]));
        let shift = tape.constant(Tensor::zeros(&[1]));
        let (y, stats) = x.batch_norm(scale, shift, None).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.5]);
        assert_eq!(stats.var, vec![1.25]);
        let y = y.value();
        assert!(y.sum().abs() < 1e-12);
    }

    #[test]
    fn inference_with_matching_running_stats_reproduces_training_output() {
        let tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| ((i * 13) % 17) as f64 * 0.3 - 2.0).collect();
        let x = tape.constant(Tensor::new(&[2, 3, 2, 2], data).unwrap());
        let scale = tape.constant(Tensor::from_f64(&[3], &[0.5, 1.5, -1.0]).unwrap());
        let shift = tape.constant(Tensor::from_f64(&[3], &[0.1, 0.0, 2.0]).unwrap());
        let (train, stats) = x.batch_norm(scale, shift, None).unwrap();
        let stats = stats.unwrap();
        let rm = Tensor::new(&[3], stats.mean).unwrap();
        let rv = Tensor::new(&[3], stats.var).unwrap();
        let (infer, none) = x.batch_norm(scale, shift, Some((&rm, &rv))).unwrap();
        assert!(none.is_none());
        assert_eq!(train.value().data(), infer.value().data());
    }
}
