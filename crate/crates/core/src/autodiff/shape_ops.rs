//! Reshape, permute, slice, concatenate and explicit broadcast.

use crate::autodiff::elementwise::{broadcast_map, broadcast_shapes, reduce_to};
use crate::autodiff::tape::{Backward, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{numel, strides, Tensor};

struct ReshapeOp;

impl<T: Real> Backward<T> for ReshapeOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.clone().reshape(inputs[0].shape())?)])
    }
}

pub(crate) fn permute_tensor<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let shape = x.shape();
    let n = shape.len();
    let mut seen = vec![false; n];
    if axes.len() != n || axes.iter().any(|&a| a >= n || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::shape("permute", &[shape, axes]));
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let d = x.data();
    let mut out = Vec::with_capacity(d.len());
    let mut index = vec![0usize; n];
    let mut offset = 0usize;
    for _ in 0..d.len() {
        out.push(d[offset]);
        for ax in (0..n).rev() {
            index[ax] += 1;
            offset += src[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            offset -= src[ax] * index[ax];
            index[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

struct PermuteOp {
    inverse: Vec<usize>,
}

impl<T: Real> Backward<T> for PermuteOp {
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(permute_tensor(grad, &self.inverse)?)])
    }
}

struct SliceOp {
    axis: usize,
    start: usize,
}

impl<T: Real> Backward<T> for SliceOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let shape = inputs[0].shape();
        let outer: usize = shape[..self.axis].iter().product();
        let inner: usize = shape[self.axis + 1..].iter().product();
        let (n_in, n_out) = (shape[self.axis], output.shape()[self.axis]);
        let mut out = Tensor::zeros(shape);
        let d = out.data_mut();
        let g = grad.data();
        for o in 0..outer {
            let src = &g[o * n_out * inner..(o + 1) * n_out * inner];
            let dst = (o * n_in + self.start) * inner;
            d[dst..dst + n_out * inner].copy_from_slice(src);
        }
        Ok(vec![Some(out)])
    }
}

struct ConcatOp {
    axis: usize,
}

impl<T: Real> Backward<T> for ConcatOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let shape = output.shape();
        let outer: usize = shape[..self.axis].iter().product();
        let inner: usize = shape[self.axis + 1..].iter().product();
        let n_out = shape[self.axis];
        let g = grad.data();
        let mut start = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for (x, &need) in inputs.iter().zip(needs) {
            let n = x.shape()[self.axis];
            if need {
                let mut part = Vec::with_capacity(x.len());
                for o in 0..outer {
                    let s = (o * n_out + start) * inner;
                    part.extend_from_slice(&g[s..s + n * inner]);
                }
                grads.push(Some(Tensor::new(x.shape(), part)?));
            } else {
                grads.push(None);
            }
            start += n;
        }
        Ok(grads)
    }
}

struct BroadcastOp;

impl<T: Real> Backward<T> for BroadcastOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(reduce_to(grad.data(), output.shape(), inputs[0].shape()))])
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape().push(value, &[self], ReshapeOp))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let value = permute_tensor(&self.value(), axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.tape().push(value, &[self], PermuteOp { inverse }))
    }

    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'t, T>> {
        let mut axes: Vec<usize> = (0..self.shape().len()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(Error::shape("transpose", &[&self.shape(), &[a, b]]));
        }
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape("slice", &[shape, &[axis, start, end]]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let d = x.data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = end - start;
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.tape().push(value, &[self], SliceOp { axis, start }))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if broadcast_shapes(x.shape(), shape).as_deref() != Some(shape) {
            return Err(Error::shape("broadcast_to", &[x.shape(), shape]));
        }
        let d = x.data();
        let data = broadcast_map(shape, x.shape()).into_iter().map(|i| d[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.tape().push(value, &[self], BroadcastOp))
    }
}

/// Concatenates `parts` along `axis`; all other extents must agree.
pub fn concat<'t, T: Real>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat", &[]))?;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::shape("concat", &[&base, &[axis]]));
    }
    for v in &values {
        let s = v.shape();
        let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::shape("concat", &[&base, s]));
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &values {
            let n = v.shape()[axis];
            out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut shape = base.clone();
    shape[axis] = total;
    debug_assert_eq!(numel(&shape), out.len());
    let value = Tensor::new(&shape, out)?;
    Ok(first.tape().push(value, parts, ConcatOp { axis }))
}
