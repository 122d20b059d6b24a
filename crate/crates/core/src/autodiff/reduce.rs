//! Reductions and softmax along a selected axis.

use crate::autodiff::tape::{Backward, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Splits `shape` around `axis` into (outer, extent, inner).
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut out = shape.to_vec();
    if keepdim {
        out[axis] = 1;
    } else {
        out.remove(axis);
    }
    out
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum ReduceKind {
    Sum,
    Mean,
    Max,
}

struct ReduceOp {
    kind: ReduceKind,
    axis: usize,
    argmax: Vec<usize>,
}

impl<T: Real> Backward<T> for ReduceOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let shape = inputs[0].shape();
        let (outer, n, inner) = split(shape, self.axis);
        let g = grad.data();
        let mut out = Tensor::zeros(shape);
        let d = out.data_mut();
        match self.kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                let scale = if self.kind == ReduceKind::Mean {
                    T::one() / T::from_f64(n as f64)
                } else {
                    T::one()
                };
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            d[(o * n + k) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
            }
            ReduceKind::Max => {
                for o in 0..outer {
                    for i in 0..inner {
                        let k = self.argmax[o * inner + i];
                        d[(o * n + k) * inner + i] = g[o * inner + i];
                    }
                }
            }
        }
        Ok(vec![Some(out)])
    }
}

struct SoftmaxOp {
    axis: usize,
}

impl<T: Real> Backward<T> for SoftmaxOp {
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (outer, n, inner) = split(output.shape(), self.axis);
        let y = output.data();
        let g = grad.data();
        let mut out = Tensor::zeros(output.shape());
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let dot: T = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                for k in 0..n {
                    d[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                }
            }
        }
        Ok(vec![Some(out)])
    }
}

impl<'t, T: Real> Var<'t, T> {
    fn reduce(self, kind: ReduceKind, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::shape("reduce", &[shape, &[axis]]));
        }
        let (outer, n, inner) = split(shape, axis);
        let d = x.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            out[o * inner + i] += d[(o * n + k) * inner + i];
                        }
                    }
                }
                if kind == ReduceKind::Mean {
                    let s = T::one() / T::from_f64(n as f64);
                    out.iter_mut().for_each(|v| *v *= s);
                }
            }
            ReduceKind::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = d[o * n * inner + i];
                        let mut arg = 0;
                        for k in 1..n {
                            let v = d[(o * n + k) * inner + i];
                            if v > best {
                                best = v;
                                arg = k;
                            }
                        }
                        out[o * inner + i] = best;
                        argmax[o * inner + i] = arg;
                    }
                }
            }
        }
        let value = Tensor::new(&reduced_shape(shape, axis, keepdim), out)?;
        Ok(self.tape().push(value, &[self], ReduceOp { kind, axis, argmax }))
    }

    pub fn sum(self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        self.reduce(ReduceKind::Sum, axis, keepdim)
    }

    pub fn mean(self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        self.reduce(ReduceKind::Mean, axis, keepdim)
    }

    /// Maximum along `axis`; the gradient goes to the first maximal entry.
    pub fn max(self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        self.reduce(ReduceKind::Max, axis, keepdim)
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let n = self.value().len();
        let flat = self.reshape(&[n]).expect("same element count");
        flat.sum(0, false).expect("axis 0 exists")
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let n = self.value().len();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Softmax along `axis`, computed from exponentials shifted by the maximum.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &[shape, &[axis]]));
        }
        let (outer, n, inner) = split(shape, axis);
        let d = x.data();
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| d[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..n {
                    let e = (d[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[idx(k)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.tape().push(value, &[self], SoftmaxOp { axis }))
    }
}
