//! Unary and broadcasting binary primitives.

use crate::autodiff::tape::{Backward, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{numel, strides, Tensor};

/// Numpy-style broadcast of two shapes (trailing axes aligned).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out_shape`, the flat index of the broadcast source.
pub(crate) fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let n = out_shape.len();
    let pad = n - in_shape.len();
    let in_strides = strides(in_shape);
    // Source stride per output axis, zero on broadcast axes.
    let src: Vec<usize> = (0..n)
        .map(|i| {
            if i < pad || in_shape[i - pad] == 1 {
                0
            } else {
                in_strides[i - pad]
            }
        })
        .collect();
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut index = vec![0usize; n];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
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
    map
}

/// Sums a gradient of shape `out_shape` down to `in_shape`.
pub(crate) fn reduce_to<T: Real>(grad: &[T], out_shape: &[usize], in_shape: &[usize]) -> Tensor<T> {
    if out_shape == in_shape {
        return Tensor::new(in_shape, grad.to_vec()).expect("shape checked");
    }
    let map = broadcast_map(out_shape, in_shape);
    let mut acc = vec![T::zero(); numel(in_shape)];
    for (g, &m) in grad.iter().zip(&map) {
        acc[m] += *g;
    }
    Tensor::new(in_shape, acc).expect("shape checked")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinaryOp {
    kind: BinaryKind,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Real>(self, a: T, b: T) -> T {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b,
        }
    }
}

fn gather<T: Real>(t: &Tensor<T>, out_shape: &[usize]) -> Vec<T> {
    if t.shape() == out_shape {
        t.data().to_vec()
    } else {
        let d = t.data();
        broadcast_map(out_shape, t.shape()).into_iter().map(|i| d[i]).collect()
    }
}

pub(crate) fn binary_forward<T: Real>(kind: BinaryKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = broadcast_shapes(a.shape(), b.shape()).ok_or_else(|| Error::shape(kind.name(), &[a.shape(), b.shape()]))?;
    let data: Vec<T> = if a.shape() == b.shape() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| kind.apply(x, y)).collect()
    } else {
        let av = gather(a, &shape);
        let bv = gather(b, &shape);
        av.iter().zip(&bv).map(|(&x, &y)| kind.apply(x, y)).collect()
    };
    if shape.is_empty() {
        return Ok(Tensor::scalar(data[0]));
    }
    Tensor::new(&shape, data)
}

impl<T: Real> Backward<T> for BinaryOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let out_shape = output.shape();
        let g = grad.data();
        let ga = needs[0].then(|| {
            let local: Vec<T> = match self.kind {
                BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                BinaryKind::Mul => {
                    let bv = gather(b, out_shape);
                    g.iter().zip(&bv).map(|(&g, &b)| g * b).collect()
                }
                BinaryKind::Div => {
                    let bv = gather(b, out_shape);
                    g.iter().zip(&bv).map(|(&g, &b)| g / b).collect()
                }
            };
            reduce_to(&local, out_shape, a.shape())
        });
        let gb = needs[1].then(|| {
            let local: Vec<T> = match self.kind {
                BinaryKind::Add => g.to_vec(),
                BinaryKind::Sub => g.iter().map(|&g| -g).collect(),
                BinaryKind::Mul => {
                    let av = gather(a, out_shape);
                    g.iter().zip(&av).map(|(&g, &a)| g * a).collect()
                }
                BinaryKind::Div => {
                    let bv = gather(b, out_shape);
                    // d(a/b)/db = -(a/b)/b
                    g.iter()
                        .zip(output.data())
                        .zip(&bv)
                        .map(|((&g, &y), &b)| -g * y / b)
                        .collect()
                }
            };
            reduce_to(&local, out_shape, b.shape())
        });
        Ok(vec![ga, gb])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum UnaryKind {
    Neg,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Square,
    Sin,
    Cos,
    Scale(f64),
    Offset(f64),
}

impl UnaryKind {
    #[inline]
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            UnaryKind::Neg => -x,
            UnaryKind::Relu => x.max(T::zero()),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Square => x * x,
            UnaryKind::Sin => x.sin(),
            UnaryKind::Cos => x.cos(),
            UnaryKind::Scale(c) => x * T::from_f64(c),
            UnaryKind::Offset(c) => x + T::from_f64(c),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    #[inline]
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            UnaryKind::Neg => -T::one(),
            UnaryKind::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            UnaryKind::Sigmoid => y * (T::one() - y),
            UnaryKind::Exp => y,
            UnaryKind::Log => T::one() / x,
            UnaryKind::Sqrt => T::c(0.5) / y,
            UnaryKind::Square => T::c(2.0) * x,
            UnaryKind::Sin => x.cos(),
            UnaryKind::Cos => -x.sin(),
            UnaryKind::Scale(c) => T::from_f64(c),
            UnaryKind::Offset(_) => T::one(),
        }
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln σ(x)` without underflow.
#[inline]
pub fn log_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

struct UnaryOp {
    kind: UnaryKind,
}

impl<T: Real> Backward<T> for UnaryOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let data: Vec<T> = grad
            .data()
            .iter()
            .zip(x.data())
            .zip(output.data())
            .map(|((&g, &x), &y)| g * self.kind.derivative(x, y))
            .collect();
        Ok(vec![Some(Tensor::new(grad.shape(), data)?)])
    }
}

impl<'t, T: Real> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, kind: BinaryKind) -> Result<Var<'t, T>> {
        let value = binary_forward(kind, &self.value(), &other.value())?;
        Ok(self.tape().push(value, &[self, other], BinaryOp { kind }))
    }

    fn unary(self, kind: UnaryKind) -> Var<'t, T> {
        let value = self.value().map(|x| kind.apply(x));
        self.tape().push(value, &[self], UnaryOp { kind })
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Div)
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(UnaryKind::Neg)
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(UnaryKind::Relu)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(UnaryKind::Exp)
    }

    pub fn log(self) -> Var<'t, T> {
        self.unary(UnaryKind::Log)
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(UnaryKind::Square)
    }

    pub fn sin(self) -> Var<'t, T> {
        self.unary(UnaryKind::Sin)
    }

    pub fn cos(self) -> Var<'t, T> {
        self.unary(UnaryKind::Cos)
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        self.unary(UnaryKind::Scale(c))
    }

    pub fn offset(self, c: f64) -> Var<'t, T> {
        self.unary(UnaryKind::Offset(c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tape::Tape;

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shapes(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shapes(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shapes(&[], &[5]), Some(vec![5]));
        assert_eq!(broadcast_shapes(&[2, 3], &[2]), None);
    }

    #[test]
    fn add_and_relu_examples() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
        let x = tape.constant(Tensor::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn broadcast_add_gradient_reduces() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap(), true);
        let b = tape.leaf(Tensor::from_f64(&[3], &[10., 20., 30.]).unwrap(), true);
        let y = a.mul(b).unwrap().sum_all();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(b).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(g.wrt(a).unwrap().data(), &[10., 20., 30., 10., 20., 30.]);
    }

    #[test]
    fn mismatched_shapes_error() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(a.add(b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn stable_sigmoid_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) == 1.0);
        assert!((log_sigmoid(-800.0f64) + 800.0).abs() < 1e-12);
        assert!((log_sigmoid(2.0f64) - sigmoid(2.0f64).ln()).abs() < 1e-15);
    }
}
